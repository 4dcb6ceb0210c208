use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use mac_core::dialog::{self, Dialog, PrepConfig};
use mac_core::ngram::{QbModel, QbTrainConfig};
use mac_core::trie::MpcIndex;

use crate::print_json;

#[derive(Args)]
pub struct PrepArgs {
    /// Dialog JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Sample JSONL to write.
    #[arg(long)]
    output: PathBuf,
    /// Dialogs scored below this are dropped, as are unscored ones unless it is 0 or less.
    #[arg(long, default_value_t = 4)]
    min_score: i32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Share of dialogs held out into `--test-output`.
    #[arg(long, requires = "test_output")]
    test_fraction: Option<f64>,
    #[arg(long, requires = "test_fraction")]
    test_output: Option<PathBuf>,
}

#[derive(Serialize)]
struct PrepSummary {
    n_read: usize,
    n_bad_records: usize,
    kept_dialogs: usize,
    skipped_short: usize,
    n_samples: usize,
    n_test_samples: Option<usize>,
}

fn read_dialogs(path: &PathBuf) -> Result<(Vec<Dialog>, usize)> {
    let report = dialog::ingest(path)?;
    for e in &report.errors {
        log::warn!("{}: {e}", path.display());
    }
    Ok((report.dialogs, report.errors.len()))
}

pub fn prep(a: PrepArgs) -> Result<()> {
    let (dialogs, n_bad) = read_dialogs(&a.input)?;
    let n_read = dialogs.len();
    let cfg = PrepConfig {
        min_score: a.min_score,
        seed: a.seed,
    };
    let (train, test) = match a.test_fraction {
        Some(f) => {
            if !(0.0..1.0).contains(&f) {
                bail!("--test-fraction must be in [0, 1)");
            }
            let (train, test) = dialog::split_dialogs(dialogs, f, a.seed);
            (train, Some(test))
        }
        None => (dialogs, None),
    };
    let out = dialog::prepare(train, &cfg);
    dialog::write_jsonl(&a.output, &out.samples)?;
    let mut summary = PrepSummary {
        n_read,
        n_bad_records: n_bad,
        kept_dialogs: out.kept_dialogs,
        skipped_short: out.skipped_short,
        n_samples: out.samples.len(),
        n_test_samples: None,
    };
    if let (Some(test), Some(path)) = (test, &a.test_output) {
        let t = dialog::prepare(test, &cfg);
        dialog::write_jsonl(path, &t.samples)?;
        summary.kept_dialogs += t.kept_dialogs;
        summary.skipped_short += t.skipped_short;
        summary.n_test_samples = Some(t.samples.len());
    }
    print_json(&summary)
}

#[derive(Args)]
pub struct StatsArgs {
    /// Dialog JSONL.
    #[arg(long)]
    input: PathBuf,
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let (dialogs, _) = read_dialogs(&a.input)?;
    print_json(&dialog::compute_stats(&dialogs)?)
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    dialogs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Dialog JSONL to write.
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let dialogs = mac_core::synth::dialogs(a.dialogs, a.seed);
    dialog::write_jsonl(&a.out, &dialogs)?;
    Ok(())
}

fn read_corpus(path: &PathBuf) -> Result<Vec<(String, u64)>> {
    let samples = dialog::read_samples(path)?;
    let corpus = dialog::utterance_corpus(&samples);
    if corpus.is_empty() {
        bail!("{} holds no utterances", path.display());
    }
    Ok(corpus)
}

#[derive(Args)]
pub struct BuildMpcArgs {
    /// Sample JSONL; every gold utterance is indexed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn build_mpc(a: BuildMpcArgs) -> Result<()> {
    let corpus = read_corpus(&a.input)?;
    MpcIndex::build(&corpus)
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("indexed {} distinct utterances into {}", corpus.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct BuildQbArgs {
    /// Sample JSONL; every gold utterance is a training sentence.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = QbTrainConfig::default().order)]
    order: usize,
    /// N-grams seen fewer times are pruned.
    #[arg(long, default_value_t = QbTrainConfig::default().prune_min_count)]
    prune: u64,
    #[arg(long, default_value_t = QbTrainConfig::default().vocab_size)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn build_qb(a: BuildQbArgs) -> Result<()> {
    let corpus = read_corpus(&a.input)?;
    let cfg = QbTrainConfig {
        vocab_size: a.vocab_size,
        order: a.order,
        prune_min_count: a.prune,
    };
    let model = QbModel::train_counted(&corpus, &cfg)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "vocab {} tokens, order {}, written to {}",
        model.vocab.len(),
        model.lm.order(),
        a.out.display()
    );
    Ok(())
}
