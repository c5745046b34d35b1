use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use sparse_frontend::attacks::{run_attack, AttackConfig, AttackReport};
use sparse_frontend::dictlearn::read_dictionary;
use sparse_frontend::error::{Error, Result};
use sparse_frontend::harness::{
    compare_defenses, load_dataset, prepare_data, prepare_dictionary, rerun_manifest, run_sweep, schema_text,
    synth_dataset, train_variant, write_dataset, ExperimentSpec, Manifest, SynthSpec, Variant,
};
use sparse_frontend::model::{evaluate, load_pipeline, save_pipeline};

#[derive(Parser)]
#[command(version, about = "Sparse-coding frontend defense and adaptive attacks")]
struct Cli {
    /// Print the annotated configuration schema and exit.
    #[arg(long)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a patch dictionary from the configured training data.
    LearnDict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a pipeline and write an SCFW checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dictionary for the defended variant.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "defended")]
        variant: VariantArg,
    },
    /// Attack a checkpoint on a dataset and write a CSV or JSON report.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// TOML attack configuration.
        #[arg(long)]
        attack: PathBuf,
        /// SCDS file or CIFAR-10 batch file/directory.
        #[arg(long)]
        data: PathBuf,
        /// Report path; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        report: PathBuf,
        /// Attack only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the configured attack-parameter grid.
    Sweep {
        #[arg(long, required_unless_present = "rerun")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run a manifest into `--out-dir` and check the outputs match.
        #[arg(long, requires = "out_dir")]
        rerun: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare defenses under every attack family.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate the synthetic dataset as an SCDS file.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Print the annotated configuration schema.
    PrintSchema,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Natural,
    Defended,
    Adversarial,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Natural => Variant::Natural,
            VariantArg::Defended => Variant::Defended,
            VariantArg::Adversarial => Variant::Adversarial,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    model_hash: String,
    clean_accuracy: f64,
    adversarial_accuracy: f64,
    mean_l2: Option<f64>,
    #[serde(flatten)]
    report: AttackReport,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.print_schema {
        print!("{}", schema_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("no subcommand given; see --help");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::LearnDict { config, out } => {
            let mut spec = ExperimentSpec::load(&config)?;
            spec.dictionary.path = None;
            let (train_set, _) = prepare_data(&spec)?;
            let (dict, _) = prepare_dictionary(&spec, &train_set, &out)?;
            info!("wrote {} atoms of dimension {} to {}", dict.num_atoms(), dict.patch_dim(), out.display());
        }
        Command::Train {
            config,
            dict,
            out,
            variant,
        } => {
            let spec = ExperimentSpec::load(&config)?;
            let variant = Variant::from(variant);
            let (train_set, test) = prepare_data(&spec)?;
            let dictionary = match (&dict, variant) {
                (Some(path), Variant::Defended) => Some(read_dictionary(fs::File::open(path).map(std::io::BufReader::new)?)?),
                (None, Variant::Defended) => return Err(Error::Config("--dict is required for the defended variant".into())),
                _ => None,
            };
            let pipeline = train_variant(&spec, variant, None, &train_set, dictionary.as_ref())?;
            let dict_path = (variant == Variant::Defended).then_some(dict.as_deref()).flatten();
            save_pipeline(&pipeline, &out, dict_path)?;
            info!("test accuracy {:.4}; wrote {}", evaluate(&pipeline, &test)?, out.display());
        }
        Command::Attack {
            model,
            attack,
            data,
            report,
            limit,
        } => {
            let pipeline = load_pipeline::<f32>(&model)?;
            let cfg: AttackConfig =
                toml::from_str(&fs::read_to_string(&attack)?).map_err(|e| Error::Config(e.to_string()))?;
            let data = load_dataset(&data)?;
            let n = limit.unwrap_or(data.len()).min(data.len());
            let examples = (0..n).map(|i| (i, data.image::<f64>(i).to_f64_vec(), data.label(i)));
            let rep = run_attack(&pipeline, examples, &cfg)?;
            info!(
                "clean accuracy {:.4}, adversarial accuracy {:.4}",
                rep.clean_accuracy(),
                rep.adversarial_accuracy()
            );
            write_report(&report, pipeline.config_hash(), rep)?;
        }
        Command::Sweep {
            config,
            jobs,
            rerun,
            out_dir,
        } => match rerun {
            Some(manifest) => {
                let manifest = Manifest::load(&manifest)?;
                let differing = rerun_manifest(&manifest, &out_dir.expect("required by clap"), jobs)?;
                if !differing.is_empty() {
                    return Err(Error::InvalidArgument(format!("outputs differ from the manifest: {differing:?}")));
                }
                info!("all {} outputs reproduced", manifest.outputs.len());
            }
            None => {
                let mut spec = ExperimentSpec::load(&config.expect("required by clap"))?;
                if let Some(dir) = out_dir {
                    spec.output_dir = dir;
                }
                let out = run_sweep(&spec, jobs)?;
                let failed = out.rows.iter().filter(|r| r.status != "ok").count();
                info!("{} rows ({failed} failed) in {}", out.rows.len(), out.csv.display());
            }
        },
        Command::Compare { config } => {
            let spec = ExperimentSpec::load(&config)?;
            for row in compare_defenses(&spec)? {
                println!(
                    "{:<12} clean {:.3}  linf-pgd {:.3}  linf-cw {:.3}  l2-pgd {:.3}  l1-pgd {:.3}  boundary-l2 {}",
                    row.variant,
                    row.clean,
                    row.linf_pgd,
                    row.linf_cw,
                    row.l2_pgd,
                    row.l1_pgd,
                    row.boundary_l2.map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
        }
        Command::SynthData {
            out,
            seed,
            samples,
            classes,
            image_size,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                samples: samples.unwrap_or(d.samples),
                classes: classes.unwrap_or(d.classes),
                image_size: image_size.unwrap_or(d.image_size),
                ..d
            };
            let data = synth_dataset(&spec, seed)?;
            write_dataset(&data, BufWriter::new(fs::File::create(&out)?))?;
            info!("wrote {} images to {}", data.len(), out.display());
        }
        Command::PrintSchema => print!("{}", schema_text()),
    }
    Ok(())
}

fn write_report(path: &Path, model_hash: String, report: AttackReport) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    if path.extension().is_some_and(|e| e == "json") {
        let json = JsonReport {
            model_hash,
            clean_accuracy: report.clean_accuracy(),
            adversarial_accuracy: report.adversarial_accuracy(),
            mean_l2: report.mean_l2(),
            report,
        };
        serde_json::to_writer_pretty(file, &json)?;
        Ok(())
    } else {
        report.write_csv(file)
    }
}
