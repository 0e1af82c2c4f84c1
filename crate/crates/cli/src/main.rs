use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ddatr::config::{Ablation, RunConfig};
use ddatr::harness::{
    ablate, gradcheck_blocks, write_evaluation, write_metrics_csv, write_steps_csv, Checkpoint, Precision, Split,
    Trainer,
};
use ddatr::synth::{generate_corpus, read_corpus, vocabulary, write_corpus, StudyRecord, SynthConfig};
use ddatr_tensor::Scalar;

#[derive(Parser)]
#[command(name = "ddatr", version, about = "Longitudinal chest-image report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    precision: String,
    #[arg(long, default_value = "none")]
    ablation: String,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.display().to_string();
        }
        let cfg = cfg.with_ablation(self.ablation.parse::<Ablation>()?);
        cfg.validate()?;
        Ok(cfg)
    }

    fn precision(&self) -> Result<Precision> {
        Ok(self.precision.parse()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic longitudinal corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON corpus configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        visits: Option<usize>,
        #[arg(long)]
        prior_fraction: Option<f64>,
    },
    /// Train on the configured corpus and write a checkpoint.
    Train(Common),
    /// Generate reports for a split and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        /// Corpus to evaluate instead of the configured test data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate reports without scoring.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every block at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate the full model and each ablation row.
    Ablate(Common),
}

fn load_corpus(dir: &Path) -> Result<Vec<StudyRecord>> {
    let recs = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    if recs.is_empty() {
        bail!("corpus {} is empty", dir.display());
    }
    Ok(recs)
}

fn train<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let records = load_corpus(Path::new(&cfg.train_data))?;
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out)?;
    cfg.save(out.join("config.json"))?;
    let mut t = Trainer::<T>::new(cfg, vocabulary())?;
    let samples = t.samples(&records)?;
    let mut steps = Vec::new();
    for _ in 0..cfg.epochs {
        let e = t.train_epoch(&samples, &mut steps)?;
        eprintln!(
            "epoch {} total {:.4} lm {:.4} ce_cur {:.4} ce_prior {:.4}",
            e.epoch, e.total, e.lm, e.ce_cur, e.ce_prior
        );
        write_steps_csv(out.join("steps.csv"), &steps)?;
        t.checkpoint().save(out.join("checkpoint.json"))?;
    }
    fs::write(out.join("history.json"), serde_json::to_string_pretty(&t.history)?)?;
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

fn evaluate<T: Scalar>(ck: &Checkpoint, data: &Path, split: Split, out: &Path, score: bool) -> Result<()> {
    let t = Trainer::<T>::from_checkpoint(ck)?;
    let records = load_corpus(data)?;
    let selected = split.select(&records);
    if selected.is_empty() {
        bail!("split {split:?} of {} is empty", data.display());
    }
    let eval = t.evaluate(&selected)?;
    write_evaluation(out, &eval)?;
    if score {
        println!("{}", serde_json::to_string_pretty(&eval.metrics)?);
        println!("progression_f1 {:.4}", eval.progression_f1);
    } else {
        println!("{} reports written to {}", eval.reports.len(), out.join("reports").display());
    }
    Ok(())
}

fn run_eval(common: &Common, checkpoint: &Path, split: &str, data: Option<&Path>, score: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let split: Split = split.parse()?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&ck.config.test_data));
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&ck.config.out_dir).join("eval"));
    match ck.precision {
        Precision::F32 => evaluate::<f32>(&ck, &data, split, &out, score),
        Precision::F64 => evaluate::<f64>(&ck, &data, split, &out, score),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            config,
            seed,
            patients,
            visits,
            prior_fraction,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
                None => SynthConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_patients = patients.unwrap_or(cfg.n_patients);
            cfg.visits_per_patient = visits.unwrap_or(cfg.visits_per_patient);
            cfg.prior_fraction = prior_fraction.unwrap_or(cfg.prior_fraction);
            let recs = generate_corpus(&cfg)?;
            write_corpus(&out, &recs)?;
            let with = recs.iter().filter(|r| r.has_prior()).count();
            println!("{} records ({} with prior) in {}", recs.len(), with, out.display());
        }
        Command::Train(common) => {
            let cfg = common.run_config()?;
            match common.precision()? {
                Precision::F32 => train::<f32>(&cfg)?,
                Precision::F64 => train::<f64>(&cfg)?,
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            data,
        } => run_eval(&common, &checkpoint, &split, data.as_deref(), true)?,
        Command::Generate {
            common,
            checkpoint,
            split,
            data,
        } => run_eval(&common, &checkpoint, &split, data.as_deref(), false)?,
        Command::Gradcheck { seed, tolerance } => {
            let rows = gradcheck_blocks(seed)?;
            let mut failed = false;
            for (block, err) in &rows {
                let ok = *err < tolerance;
                failed |= !ok;
                println!("{block:<16} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            if failed {
                bail!("gradient check exceeded {tolerance:e}");
            }
        }
        Command::Ablate(common) => {
            let cfg = common.run_config()?;
            let train = load_corpus(Path::new(&cfg.train_data))?;
            let test_records = load_corpus(Path::new(&cfg.test_data))?;
            let test: Vec<&StudyRecord> = test_records.iter().collect();
            let rows = ablate(&cfg, &vocabulary(), &train, &test, &Ablation::ALL)?;
            let out = Path::new(&cfg.out_dir);
            fs::create_dir_all(out)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            let table: Vec<(String, _)> = rows.iter().map(|r| (r.ablation.name().to_string(), r.metrics.clone())).collect();
            write_metrics_csv(out.join("ablation.csv"), &table)?;
            for r in &rows {
                println!(
                    "{:<8} f1_micro {:.4} progression_f1 {:.4} bleu4 {:.4} rougeL {:.4}",
                    r.ablation.name(),
                    r.metrics.ce_f1_micro,
                    r.progression_f1,
                    r.metrics.bleu4,
                    r.metrics.rouge_l
                );
            }
        }
    }
    Ok(())
}
