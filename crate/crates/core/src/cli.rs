//! Command-line front end. Reports go to standard output, progress and
//! errors to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::battery;
use crate::config::RunConfig;
use crate::downstream::{
    classifier_fingerprint, evaluate, retrain_fingerprint, retrain_with_encodings, train_baseline,
    Classifier,
};
use crate::error::{Error, Result};
use crate::probes::probe_suite;
use crate::synthdata::{
    corpus_fingerprint, gen_corpus, read_corpus, write_corpus, write_features, Split, Utterance,
};
use crate::training::{finetune, pretrain_decoder, train_fingerprint, Checkpoint, EpochStats};
use crate::vaeve::{encode_mean, VaeveParams};

#[derive(Debug, Parser)]
#[command(name = "vaeve", version, about = "Variability encoder pipelines")]
pub struct Cli {
    /// Worker threads for the parallel stages. 1 keeps every run bit-exact
    /// across machines; results do not depend on this value either way.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData { config: PathBuf, out_dir: PathBuf },
    /// Pretrain the decoder with the latent branch switched off.
    Pretrain {
        config: PathBuf,
        corpus: PathBuf,
        out_ckpt: PathBuf,
    },
    /// Fine-tune the full model from a pretrained checkpoint.
    Train {
        config: PathBuf,
        corpus: PathBuf,
        in_ckpt: PathBuf,
        out_ckpt: PathBuf,
    },
    /// Write posterior means for every utterance.
    Encode {
        config: PathBuf,
        ckpt: PathBuf,
        corpus: PathBuf,
        out_dir: PathBuf,
    },
    /// Train the acoustic-only frame classifier.
    TrainClassifier {
        config: PathBuf,
        corpus: PathBuf,
        out_ckpt: PathBuf,
    },
    /// Widen a baseline classifier by the latent block and retrain it.
    Retrain {
        config: PathBuf,
        cls_ckpt: PathBuf,
        vaeve_ckpt: PathBuf,
        corpus: PathBuf,
        out_ckpt: PathBuf,
    },
    /// Frame error on the test split: `eval <config> <cls-ckpt> [vaeve-ckpt] <corpus>`.
    Eval {
        config: PathBuf,
        cls_ckpt: PathBuf,
        /// Optional encoder checkpoint followed by the corpus directory.
        #[arg(num_args = 1..=2, required = true, value_name = "[VAEVE_CKPT] CORPUS")]
        rest: Vec<PathBuf>,
    },
    /// Probe suite on the test split.
    Probe {
        config: PathBuf,
        vaeve_ckpt: PathBuf,
        corpus: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| run(cli.command, &mut std::io::stdout().lock())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn corpus_at(dir: &Path) -> Result<Vec<Utterance>> {
    read_corpus(dir).map(|(c, _)| c)
}

fn owned(set: Vec<&Utterance>) -> Vec<Utterance> {
    set.into_iter().cloned().collect()
}

fn log_epochs(history: &[EpochStats]) {
    for h in history {
        eprintln!(
            "{} epoch {:>3}  lr {:.3e}  loss {:.6}  recon {:.6}  kl {:.6}",
            h.stage, h.epoch, h.lr, h.loss, h.recon, h.kl
        );
    }
}

fn load_vaeve(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, VaeveParams)> {
    let ckpt = Checkpoint::load(path, Some(&train_fingerprint(&cfg.vaeve, &cfg.train)))?;
    let params = VaeveParams::from_set(&cfg.vaeve, ckpt.params.clone())?;
    Ok((ckpt, params))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let (corpus, _) = gen_corpus(&cfg.corpus)?;
            write_corpus(&corpus, &out_dir, Some(&cfg.corpus))
        }
        Command::Pretrain {
            config,
            corpus,
            out_ckpt,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = corpus_at(&corpus)?;
            let split = cfg.split(&corpus)?;
            let train = owned(Split::select(&corpus, &split.train)?);
            let outcome = pretrain_decoder(&train, &cfg.vaeve, &cfg.train, cfg.seed)?;
            log_epochs(&outcome.history);
            outcome.checkpoint.save(&out_ckpt)
        }
        Command::Train {
            config,
            corpus,
            in_ckpt,
            out_ckpt,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = corpus_at(&corpus)?;
            let split = cfg.split(&corpus)?;
            let train = owned(Split::select(&corpus, &split.train)?);
            let start = Checkpoint::load(&in_ckpt, None)?;
            let outcome = finetune(&train, &start, &cfg.vaeve, &cfg.train, cfg.seed)?;
            log_epochs(&outcome.history);
            outcome.checkpoint.save(&out_ckpt)
        }
        Command::Encode {
            config,
            ckpt,
            corpus,
            out_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (_, params) = load_vaeve(&cfg, &ckpt)?;
            let corpus = corpus_at(&corpus)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for u in &corpus {
                let mu = encode_mean(&u.features, &cfg.vaeve, &params)?;
                write_features(&out_dir.join(format!("{}.vef", u.id)), &mu)?;
            }
            Ok(())
        }
        Command::TrainClassifier {
            config,
            corpus,
            out_ckpt,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = corpus_at(&corpus)?;
            let split = cfg.split(&corpus)?;
            let train = Split::select(&corpus, &split.train)?;
            let outcome =
                train_baseline(&train, &cfg.classifier, cfg.vaeve.phoneme_count, cfg.seed)?;
            for h in &outcome.history {
                eprintln!("classifier epoch {:>3}  loss {:.6}", h.epoch, h.mean_loss);
            }
            outcome.checkpoint.save(&out_ckpt)
        }
        Command::Retrain {
            config,
            cls_ckpt,
            vaeve_ckpt,
            corpus,
            out_ckpt,
        } => {
            let cfg = RunConfig::load(&config)?;
            let baseline = Checkpoint::load(&cls_ckpt, None)?;
            let (vckpt, params) = load_vaeve(&cfg, &vaeve_ckpt)?;
            let corpus = corpus_at(&corpus)?;
            let split = cfg.split(&corpus)?;
            let train = Split::select(&corpus, &split.train)?;
            let outcome = retrain_with_encodings(
                &baseline,
                &cfg.classifier,
                &cfg.vaeve,
                &params,
                &vckpt.fingerprint,
                &train,
                &cfg.retrain,
                cfg.seed,
            )?;
            for h in &outcome.history {
                eprintln!("retrain epoch {:>3}  loss {:.6}", h.epoch, h.mean_loss);
            }
            outcome.checkpoint.save(&out_ckpt)
        }
        Command::Eval {
            config,
            cls_ckpt,
            rest,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (vaeve_ckpt, corpus_dir) = match rest.as_slice() {
                [c] => (None, c),
                [v, c] => (Some(v), c),
                _ => unreachable!("clap enforces one or two trailing paths"),
            };
            let vaeve = vaeve_ckpt.map(|p| load_vaeve(&cfg, p)).transpose()?;
            let expected = match &vaeve {
                Some((v, _)) => {
                    retrain_fingerprint(&cfg.classifier, &cfg.retrain, &cfg.vaeve, &v.fingerprint)
                }
                None => classifier_fingerprint(&cfg.classifier),
            };
            let cls = Checkpoint::load(&cls_ckpt, Some(&expected))?;
            let classifier = Classifier::from_params(cls.params, &cfg.classifier)?;
            let corpus = corpus_at(corpus_dir)?;
            let split = cfg.split(&corpus)?;
            let report = evaluate(
                &classifier,
                vaeve.as_ref().map(|(_, p)| (&cfg.vaeve, p)),
                &corpus,
                &split,
                &cls.fingerprint,
            )?;
            emit(out, &report.to_json())
        }
        Command::Probe {
            config,
            vaeve_ckpt,
            corpus,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (ckpt, params) = load_vaeve(&cfg, &vaeve_ckpt)?;
            let corpus = corpus_at(&corpus)?;
            let split = cfg.split(&corpus)?;
            let report = probe_suite(
                &cfg.vaeve,
                &params,
                &corpus,
                &split,
                &cfg.probe,
                hex::encode(ckpt.fingerprint),
                corpus_fingerprint(&corpus),
            )?;
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            emit(out, &text)
        }
        Command::Gradcheck => {
            let cases = battery::run(0)?;
            let mut worst = 0.0f64;
            let mut failed = Vec::new();
            for case in &cases {
                let r = &case.report;
                worst = worst.max(r.max_rel_error);
                let status = if case.passed() { "ok" } else { "FAIL" };
                emit(
                    out,
                    &format!(
                        "{:<14} {:>4} entries  max rel error {:.3e}  {status}\n",
                        case.name, r.checked, r.max_rel_error
                    ),
                )?;
                if !case.passed() {
                    failed.push(case.name);
                }
            }
            emit(
                out,
                &format!(
                    "max relative error {worst:.3e} over {} checks (bound {:.0e})\n",
                    cases.len(),
                    battery::TOLERANCE
                ),
            )?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
    }
}
