use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use blindiris::data::{make_pairs, Dataset, DatasetManifest, SplitSpec};
use blindiris::evaluate::evaluate;
use blindiris::training::{self, Checkpoint, StageOutput};
use blindiris::RunConfig;

/// Blind iris restoration and recognition: data synthesis, degradation,
/// staged training, restoration, and evaluation.
#[derive(Parser)]
#[command(name = "blindiris", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory for every output.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overwrite an existing, non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic iris set and its train/test split.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Build LQ/HQ pairs from an HQ dataset.
    Degrade {
        #[command(flatten)]
        common: Common,
        /// Manifest file, or a directory with one subdirectory per class.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
    /// Stage 1: pretrain the GAN prior on HQ images.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
    /// Stage 2: train the iris classifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
    /// Stage 3: fine-tune the restorer on LQ/HQ pairs with a frozen classifier.
    FinetuneRestorer {
        #[command(flatten)]
        common: Common,
        /// Pair manifest from `degrade`.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Checkpoint from `train-prior`.
        #[arg(long, value_name = "PATH")]
        prior: PathBuf,
        #[arg(long, value_name = "PATH")]
        classifier: PathBuf,
    },
    /// Stage 4: fine-tune the classifier on restored LQ images.
    FinetuneClassifier {
        #[command(flatten)]
        common: Common,
        /// Manifest with LQ records.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        restorer: PathBuf,
        #[arg(long, value_name = "PATH")]
        classifier: PathBuf,
    },
    /// Restore every image of a dataset.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        restorer: PathBuf,
    },
    /// Degrade, restore and classify a test set; report PSNR, FID and
    /// recognition rate next to the unrestored baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        restorer: PathBuf,
        #[arg(long, value_name = "PATH")]
        classifier: PathBuf,
        /// Test manifest (HQ records are used).
        #[arg(long, value_name = "PATH")]
        test: PathBuf,
        /// Classifier for the unrestored baseline row; defaults to
        /// `--classifier`.
        #[arg(long, value_name = "PATH")]
        baseline_classifier: Option<PathBuf>,
    },
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    seed: u64,
    notes: Vec<String>,
}

impl Run {
    fn open(c: &Common, name: &str) -> anyhow::Result<Self> {
        let cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if c.out.exists() {
            let occupied = fs::read_dir(&c.out)
                .with_context(|| format!("reading {}", c.out.display()))?
                .next()
                .is_some();
            if occupied && !c.force {
                bail!("run directory {} is not empty; pass --force to overwrite", c.out.display());
            }
            if occupied {
                fs::remove_dir_all(&c.out)?;
            }
        }
        fs::create_dir_all(&c.out)?;
        fs::write(c.out.join("config.toml"), cfg.to_toml())?;
        fs::write(c.out.join("seed"), format!("{}\n", c.seed))?;
        Ok(Self {
            dir: c.out.clone(),
            cfg,
            seed: c.seed,
            notes: vec![format!("command: {name}")],
        })
    }

    fn note(&mut self, line: String) {
        self.notes.push(line);
    }

    fn finish(self) -> anyhow::Result<()> {
        let mut text = self.notes.join("\n");
        text.push('\n');
        fs::write(self.dir.join("run.log"), text)?;
        Ok(())
    }

    /// A manifest path, or a class-directory tree resampled to the
    /// configured size.
    fn load_data(&mut self, path: &Path) -> anyhow::Result<Dataset> {
        let ds = if path.is_dir() {
            let n = self.cfg.data.image_size;
            Dataset::from_class_dirs(path, Some((n, n)))?
        } else {
            Dataset::load(path)?
        };
        self.note(format!("input: {} ({} records)", path.display(), ds.manifest.len()));
        Ok(ds)
    }

    fn stage(mut self, out: StageOutput, file: &str) -> anyhow::Result<()> {
        out.checkpoint.save(&self.dir.join(file))?;
        out.log.write(&self.dir.join("log.tsv"))?;
        let report = out.report.to_text();
        fs::write(self.dir.join("report.txt"), &report)?;
        print!("{report}");
        self.note(format!("checkpoint: {file}"));
        self.finish()
    }
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { common } => {
            let mut run = Run::open(&common, "synth-data")?;
            let d = &run.cfg.data;
            let ds = Dataset::synthetic(d.num_classes, d.per_class, d.image_size, run.seed)?;
            let split = SplitSpec {
                seed: run.seed,
                ..d.split
            };
            let (train, test) = ds.split(&split)?;
            for (set, name) in [(&ds, "all.manifest"), (&train, "train.manifest"), (&test, "test.manifest")] {
                set.save(&run.dir, name)?;
                run.note(format!("wrote {name} ({} records)", set.manifest.len()));
            }
            run.finish()
        }
        Command::Degrade { common, input } => {
            let mut run = Run::open(&common, "degrade")?;
            let hq = run.load_data(&input)?;
            let hq = hq.subset(&hq.hq_indices())?;
            let pairs = make_pairs(&hq, &run.cfg.degradation, run.seed)?;
            pairs.save(&run.dir, "pairs.manifest")?;
            run.note(format!("wrote pairs.manifest ({} records)", pairs.manifest.len()));
            run.finish()
        }
        Command::TrainPrior { common, input } => {
            let mut run = Run::open(&common, "train-prior")?;
            let ds = run.load_data(&input)?;
            let out = training::run_prior_pretrain(&ds, &run.cfg, run.seed)?;
            run.stage(out, "prior.ckpt")
        }
        Command::TrainClassifier { common, input } => {
            let mut run = Run::open(&common, "train-classifier")?;
            let ds = run.load_data(&input)?;
            let ds = ds.subset(&ds.hq_indices())?;
            let out = training::run_classifier_train(&ds, &run.cfg, run.seed)?;
            run.stage(out, "classifier.ckpt")
        }
        Command::FinetuneRestorer {
            common,
            input,
            prior,
            classifier,
        } => {
            let mut run = Run::open(&common, "finetune-restorer")?;
            let pairs = run.load_data(&input)?;
            let (p, c) = (load_ckpt(&prior)?, load_ckpt(&classifier)?);
            let out = training::run_restorer_finetune(&pairs, &p, &c, &run.cfg, run.seed)?;
            run.stage(out, "restorer.ckpt")
        }
        Command::FinetuneClassifier {
            common,
            input,
            restorer,
            classifier,
        } => {
            let mut run = Run::open(&common, "finetune-classifier")?;
            let ds = run.load_data(&input)?;
            let (r, c) = (load_ckpt(&restorer)?, load_ckpt(&classifier)?);
            let out = training::run_classifier_finetune(&ds, &r, &c, &run.cfg, run.seed)?;
            run.stage(out, "classifier.ckpt")
        }
        Command::Restore {
            common,
            input,
            restorer,
        } => {
            let mut run = Run::open(&common, "restore")?;
            let ds = run.load_data(&input)?;
            let ckpt = load_ckpt(&restorer)?;
            let store = training::restorer_from_checkpoint(&run.cfg, &ckpt)?;
            let refs: Vec<_> = ds.images.iter().collect();
            let images = training::restore_images(&store, &run.cfg.restorer_config(), &refs)?;
            let mut manifest: DatasetManifest = ds.manifest.clone();
            for (i, r) in manifest.records.iter_mut().enumerate() {
                r.path = format!("restored:{i}");
            }
            let restored = Dataset::new(manifest, images)?;
            restored.save(&run.dir, "restored.manifest")?;
            run.note(format!("wrote restored.manifest ({} records)", restored.manifest.len()));
            run.finish()
        }
        Command::Evaluate {
            common,
            restorer,
            classifier,
            test,
            baseline_classifier,
        } => {
            let mut run = Run::open(&common, "evaluate")?;
            let ds = run.load_data(&test)?;
            let r = load_ckpt(&restorer)?;
            let c = load_ckpt(&classifier)?;
            let b = baseline_classifier.as_deref().map(load_ckpt).transpose()?;
            let report = evaluate(&r, &c, b.as_ref(), &ds, &run.cfg, run.seed)?;
            fs::write(run.dir.join("report.txt"), report.to_text())?;
            fs::write(run.dir.join("report.tsv"), report.to_tsv())?;
            print!("{}", report.to_text());
            run.finish()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
