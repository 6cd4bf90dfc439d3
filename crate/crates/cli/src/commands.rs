use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use idle_core::backbone::LLM_PREFIX;
use idle_core::dataset::{
    generate_synthetic, leave_one_out_split, load_interactions, write_jsonl, EvalCase,
};
use idle_core::eval::{ablation_run, dump_embeddings, evaluate, run_variant, Variant, DEFAULT_KS};
use idle_core::id_model::{pretrain, ID_PREFIX};
use idle_core::{
    Checkpoint, ExperimentData, ItemCatalog, Metrics, ModelStack, PromptTemplate, Vocabulary,
};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command, Common, DumpArgs, EvalArgs, GenerateArgs, PretrainArgs, TrainArgs};

pub const SEED_ENV: &str = "IDLE_SEED";
const DEFAULT_SEED: u64 = 42;

/// A resolved configuration and the directory it is echoed into.
pub struct Run {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run {
    fn new(common: &Common, cfg: RunConfig) -> Result<Self> {
        let mut cfg = cfg;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.parse::<u64>()
                    .with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?,
            ),
            Err(_) => None,
        };
        let seed = common
            .seed
            .or(cfg.seed)
            .or(env_seed)
            .unwrap_or(DEFAULT_SEED);
        cfg.seed = Some(seed);
        let out = match &common.out {
            Some(p) => p.clone(),
            None => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
                PathBuf::from("runs").join(format!("{secs}-seed{seed}"))
            }
        };
        if out.is_dir() && fs::read_dir(&out)?.next().is_some() && !common.force {
            bail!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            );
        }
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Run { cfg, seed, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn template(&self) -> Result<PromptTemplate> {
        match &self.cfg.prompt_template {
            Some(p) => PromptTemplate::from_file(p)
                .with_context(|| format!("reading prompt template {}", p.display())),
            None => Ok(PromptTemplate::default()),
        }
    }
}

/// Loaded interactions with their leave-one-out split.
pub struct Dataset {
    pub catalog: ItemCatalog,
    pub data: ExperimentData,
}

fn load_dataset(run: &Run, path: &Path) -> Result<Dataset> {
    let (seqs, catalog) =
        load_interactions(path, run.cfg.data.min_len, run.cfg.data.max_title_chars)
            .with_context(|| format!("loading {}", path.display()))?;
    let split = leave_one_out_split(&seqs)?;
    let data = split.experiment(run.cfg.model.id.max_seq_len);
    info!(
        "{}: {} users, {} items, {} training examples",
        path.display(),
        seqs.len(),
        catalog.len(),
        data.training_examples(run.cfg.model.id.max_seq_len).len()
    );
    Ok(Dataset { catalog, data })
}

fn fresh_stack(run: &Run, ds: &Dataset) -> Result<ModelStack> {
    let template = run.template()?;
    let vocab = Vocabulary::for_corpus(&ds.catalog, &template);
    Ok(ModelStack::new(
        run.cfg.model.clone(),
        ds.catalog.clone(),
        template,
        vocab,
        run.seed,
    )?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Generate(a) => generate(&cli.common, cfg, a),
        Command::Pretrain(a) => cmd_pretrain(&cli.common, cfg, a),
        Command::Train(a) => train(&cli.common, cfg, a).map(|_| ()),
        Command::Eval(a) => eval(&cli.common, cfg, a).map(|_| ()),
        Command::Ablate(a) => ablate(&cli.common, cfg, a),
        Command::Dump(a) => dump(&cli.common, cfg, a),
    }
}

pub fn generate(common: &Common, mut cfg: RunConfig, a: &GenerateArgs) -> Result<()> {
    let syn = &mut cfg.synthetic;
    syn.n_users = a.users.unwrap_or(syn.n_users);
    syn.n_items = a.items.unwrap_or(syn.n_items);
    syn.pattern_order = a.order.unwrap_or(syn.pattern_order);
    syn.noise_rate = a.noise.unwrap_or(syn.noise_rate);
    // The corpus seed follows the run seed unless the file pins it.
    if let Some(seed) = common.seed {
        syn.seed = seed;
    }
    let run = Run::new(common, cfg)?;
    let corpus = generate_synthetic(&run.cfg.synthetic)?;
    write_jsonl(
        run.path("interactions.jsonl"),
        &corpus.sequences,
        &corpus.catalog,
    )?;
    let vocab = Vocabulary::for_corpus(&corpus.catalog, &run.template()?);
    vocab.write(run.path("vocab.txt"))?;
    println!(
        "wrote {} users over {} items to {}",
        corpus.sequences.len(),
        corpus.catalog.len(),
        run.out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(common: &Common, mut cfg: RunConfig, a: &PretrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    let run = Run::new(common, cfg)?;
    let ds = load_dataset(&run, &a.data.data)?;
    let mut stack = fresh_stack(&run, &ds)?;
    let examples = ds.data.training_examples(run.cfg.model.id.max_seq_len);
    let report = pretrain(
        &stack.id_model,
        &mut stack.store,
        &examples,
        &run.cfg.pretrain,
        run.seed,
    )?;
    let rows: Vec<_> = report
        .step_losses
        .iter()
        .enumerate()
        .map(|(step, loss)| json!({"step": step, "loss": loss}))
        .collect();
    write_jsonl_lines(&run.path("pretrain_log.jsonl"), &rows)?;
    let meta = json!({
        "stack": serde_json::to_value(&stack.cfg)?,
        "n_items": stack.n_items(),
        "final_loss": report.final_loss,
        "steps": report.steps,
    });
    Checkpoint::new(stack.store.named_tensors(ID_PREFIX), meta).save(run.path("id_model.ckpt"))?;
    println!(
        "pretrained {} steps, final loss {:.4}; checkpoint {}",
        report.steps,
        report.final_loss,
        run.path("id_model.ckpt").display()
    );
    Ok(())
}

/// Parses `2`, `1,3` or `1..4` (inclusive).
pub fn parse_prompt_lens(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    let out: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim_start_matches('=').trim().parse()?);
        if a > b {
            bail!("empty prompt length range {text:?}");
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .with_context(|| format!("bad prompt length {s:?}"))
            })
            .collect::<Result<_>>()?
    };
    if out.contains(&0) {
        bail!("prompt lengths must be at least 1");
    }
    Ok(out)
}

/// Builds the stack for training: fresh adapter, pretrained ID model, and a
/// loaded or seed-initialised backbone.
fn foundation(run: &Run, ds: &Dataset, a: &TrainArgs) -> Result<ModelStack> {
    if !a.id_checkpoint.exists() {
        bail!(
            "ID model checkpoint not found at {}; run `idle pretrain` first",
            a.id_checkpoint.display()
        );
    }
    let id_ckpt = Checkpoint::load(&a.id_checkpoint)
        .with_context(|| format!("loading {}", a.id_checkpoint.display()))?;
    let saved = ModelStack::config_of(&id_ckpt)?;
    if saved.id != run.cfg.model.id {
        bail!(
            "ID model checkpoint {} was trained with {:?}, but the configuration asks for {:?}",
            a.id_checkpoint.display(),
            saved.id,
            run.cfg.model.id
        );
    }
    let mut stack = fresh_stack(run, ds)?;
    stack
        .store
        .load_named(&id_ckpt.tensors)
        .with_context(|| format!("applying {}", a.id_checkpoint.display()))?;
    match &a.backbone {
        Some(p) => {
            let ckpt =
                Checkpoint::load(p).with_context(|| format!("loading backbone {}", p.display()))?;
            stack.store.load_named(&ckpt.tensors)?;
        }
        None => {
            let meta = json!({"stack": serde_json::to_value(&stack.cfg)?, "seed": run.seed});
            Checkpoint::new(stack.store.named_tensors(LLM_PREFIX), meta)
                .save(run.path("backbone.ckpt"))?;
        }
    }
    Ok(stack)
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_steps = a.max_steps.or(t.max_steps);
    t.freeze_head |= a.freeze_head;
    if let [lambda] = a.lambda[..] {
        t.lambda = lambda;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub ablation: String,
    pub lambda: f64,
    pub prompt_len: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub best_epoch: Option<usize>,
    pub checksum: String,
}

fn table(rows: &[MetricsRow]) -> String {
    let mut out = format!(
        "{:<13} {:>6} {:>4} {:>8} {:>8} {:>8} {:>8}\n",
        "ablation", "lambda", "L'", "HR@5", "HR@10", "N@5", "N@10"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<13} {:>6} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.ablation, r.lambda, r.prompt_len, r.hr5, r.hr10, r.ndcg5, r.ndcg10
        ));
    }
    out
}

/// One training run per (λ, prompt length) setting; returns the metric rows.
pub fn train(common: &Common, mut cfg: RunConfig, a: &TrainArgs) -> Result<Vec<MetricsRow>> {
    apply_train_flags(&mut cfg, a);
    let variant: Variant = a.ablation.as_deref().unwrap_or("none").parse()?;
    let lambdas = if a.lambda.is_empty() {
        vec![cfg.train.lambda]
    } else {
        a.lambda.clone()
    };
    let lens = match &a.prompt_len {
        Some(s) => parse_prompt_lens(s)?,
        None => vec![cfg.model.adapter.prompt_len],
    };
    if lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
        bail!("lambda values must be non-negative");
    }
    if let [len] = lens[..] {
        cfg.model.adapter.prompt_len = len;
    }
    let run = Run::new(common, cfg)?;
    let ds = load_dataset(&run, &a.data.data)?;
    let base = foundation(&run, &ds, a)?;
    let single = lambdas.len() * lens.len() == 1;

    let mut rows = Vec::new();
    for &lambda in &lambdas {
        for &len in &lens {
            let mut adapter = run.cfg.model.adapter.clone();
            adapter.prompt_len = len;
            let mut train_cfg = run.cfg.train.clone();
            train_cfg.lambda = lambda;
            let dir = if single {
                run.out.clone()
            } else {
                run.out.join(format!("lambda{lambda}-plen{len}"))
            };
            fs::create_dir_all(&dir)?;
            let base = base.with_adapter(adapter, run.seed)?;
            let (stack, row) = run_variant(&base, &ds.data, &train_cfg, variant, run.seed)?;
            write_jsonl_lines(&dir.join("train_log.jsonl"), &row.training.steps)?;
            write_jsonl_lines(&dir.join("epochs.jsonl"), &row.training.epochs)?;
            write_json(&dir.join("metrics.json"), &row.metrics)?;
            let effective_lambda = if variant == Variant::NoDistribution {
                0.0
            } else {
                lambda
            };
            let meta = json!({
                "ablation": variant.to_string(),
                "lambda": effective_lambda,
                "best_epoch": row.training.best_epoch,
                "seed": run.seed,
            });
            stack.checkpoint(meta)?.save(dir.join("model.ckpt"))?;
            rows.push(MetricsRow {
                ablation: variant.to_string(),
                lambda: effective_lambda,
                prompt_len: len,
                hr5: row.metrics.hr_at(5),
                hr10: row.metrics.hr_at(10),
                ndcg5: row.metrics.ndcg_at(5),
                ndcg10: row.metrics.ndcg_at(10),
                best_epoch: row.training.best_epoch,
                checksum: row.training.final_checksum.clone(),
            });
        }
    }
    write_json(&run.path("metrics.json"), &rows)?;
    print!("{}", table(&rows));
    Ok(rows)
}

/// Rebuilds a trained stack from its checkpoint and the dataset it was
/// trained on.
pub fn load_trained(run: &Run, ds: &Dataset, path: &Path) -> Result<ModelStack> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = ModelStack::config_of(&ckpt)?;
    let template = run.template()?;
    let vocab = Vocabulary::for_corpus(&ds.catalog, &template);
    let expect = |key: &str| {
        ckpt.metadata
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
    };
    if expect("n_items") != Some(ds.catalog.len()) || expect("vocab_size") != Some(vocab.len()) {
        bail!(
            "checkpoint {} was trained on a different catalog or prompt template",
            path.display()
        );
    }
    let mut stack = ModelStack::new(cfg, ds.catalog.clone(), template, vocab, run.seed)?;
    stack.load_checkpoint(&ckpt)?;
    Ok(stack)
}

fn cases<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [EvalCase]> {
    match split {
        "test" => Ok(&ds.data.test),
        "validation" => Ok(&ds.data.validation),
        other => bail!("unknown split {other:?}; expected test or validation"),
    }
}

pub fn eval(common: &Common, cfg: RunConfig, a: &EvalArgs) -> Result<Metrics> {
    let run = Run::new(common, cfg)?;
    let ds = load_dataset(&run, &a.data.data)?;
    let stack = load_trained(&run, &ds, &a.checkpoint)?;
    let metrics = evaluate(&stack, cases(&ds, &a.split)?, &DEFAULT_KS)?;
    write_json(&run.path("metrics.json"), &metrics)?;
    if a.json {
        println!("{}", serde_json::to_string(&metrics)?);
    } else {
        print!("{}", metrics.table());
    }
    Ok(metrics)
}

pub fn ablate(common: &Common, mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, a);
    if let Some(s) = &a.prompt_len {
        match parse_prompt_lens(s)?[..] {
            [len] => cfg.model.adapter.prompt_len = len,
            _ => bail!("ablate takes a single prompt length"),
        }
    }
    let run = Run::new(common, cfg)?;
    let ds = load_dataset(&run, &a.data.data)?;
    let base = foundation(&run, &ds, a)?;
    let report = ablation_run(&base, &ds.data, &run.cfg.train, run.seed)?;
    write_json(&run.path("ablation.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}

pub fn dump(common: &Common, cfg: RunConfig, a: &DumpArgs) -> Result<()> {
    let run = Run::new(common, cfg)?;
    let ds = load_dataset(&run, &a.data.data)?;
    let stack = load_trained(&run, &ds, &a.checkpoint)?;
    let all = &ds.data.test;
    let cases = &all[..a.limit.unwrap_or(all.len()).min(all.len())];
    let path = run.path("embeddings.csv");
    let n = dump_embeddings(&stack, cases, &path)?;
    println!("wrote {n} rows to {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_length_specs() {
        assert_eq!(parse_prompt_lens("2").unwrap(), vec![2]);
        assert_eq!(parse_prompt_lens("1,3").unwrap(), vec![1, 3]);
        assert_eq!(parse_prompt_lens("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_prompt_lens("1..=2").unwrap(), vec![1, 2]);
        assert!(parse_prompt_lens("0..2").is_err());
        assert!(parse_prompt_lens("3..1").is_err());
        assert!(parse_prompt_lens("x").is_err());
    }
}
