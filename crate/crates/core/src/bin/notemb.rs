//! Command-line driver for the full pipeline: corpus generation, pair
//! building, both training stages, evaluation, index building, and the
//! online-verify / offline-backcheck serving modes.
//!
//! Exit codes: 0 success, 1 validation/IO error, 2 numerical failure.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use notemb::encoder::EncoderParams;
use notemb::error::{Error, Result};
use notemb::metrics::{run_task_eval, write_metrics_csv, EvalConfig, MetricReport};
use notemb::model::{Corpus, EncodeInput, Note, TaskType};
use notemb::pairs::{
    build_pairs_with_negatives, build_stage2_samples, default_mining, read_pairs_jsonl,
    read_stage2_jsonl, write_pairs_jsonl, write_stage2_jsonl, MiningConfig, MiningStrategy,
    ReferenceEncoder,
};
use notemb::rl::{train_rl, write_rl_curve_csv, GrpoConfig, RewardConfig};
use notemb::serving::{
    build_index, calibrate_thresholds, offline_backcheck, online_verify, read_gallery_jsonl,
    write_gallery_jsonl, Category, GalleryEntry, VectorIndex, VerifyRecord,
};
use notemb::sft::{grad_check, train_sft, write_curve_csv, SftConfig};
use notemb::synth::{
    gen_corpus, holdout_notes, read_corpus_dir, read_ledger, train_notes, write_corpus_dir,
    Annotator, GenConfig, Projections,
};
use notemb::rng::Stream;

#[derive(Parser)]
#[command(name = "notemb", about = "Multimodal note embedding pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory (corpus, ledger, config).
    GenCorpus(GenCorpusArgs),
    /// Build training pairs (stage 1) or ranked samples (note2note).
    BuildPairs(BuildPairsArgs),
    /// Stage-1 contrastive training.
    TrainSft(TrainSftArgs),
    /// Stage-2 rank tuning from a stage-1 checkpoint.
    TrainRl(TrainRlArgs),
    /// Held-out evaluation across tasks and nested dims.
    Eval(EvalArgs),
    /// Build a vector index from corpus embeddings.
    IndexBuild(IndexBuildArgs),
    /// Offline top-k back-check against an index.
    Backcheck(BackcheckArgs),
    /// Online stream verification against a calibrated gallery.
    Verify(VerifyArgs),
    /// Sample a per-category gallery and calibrate its thresholds.
    BuildGallery(BuildGalleryArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// JSON file with the generation config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MiningArg {
    Band,
    Random,
}

#[derive(Args)]
struct BuildPairsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Task name or `all` for the nine stage-1 tasks.
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau_min: f64,
    #[arg(long, default_value_t = 0.7)]
    tau_max: f64,
    #[arg(long, default_value_t = 8)]
    k_neg: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cap on pairs per task; 0 = unbounded.
    #[arg(long, default_value_t = 0)]
    max_per_task: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = MiningArg::Band)]
    mining: MiningArg,
    /// Reference encoder: `aligned`, `raw`, or `ckpt:<path>`.
    #[arg(long, default_value = "aligned")]
    reference: String,
    /// Group size for note2note samples; 0 = 2M per sample.
    #[arg(long, default_value_t = 0)]
    group_size: usize,
}

#[derive(Args)]
struct TrainSftArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8,32,64,128")]
    dims: String,
    #[arg(long, default_value_t = 0.02)]
    temp: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    d_hid: usize,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Loss-curve CSV path; defaults next to the checkpoint.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Write an intermediate checkpoint (plus optimizer sidecar) every N
    /// steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
}

#[derive(Args)]
struct TrainRlArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = -5.0)]
    c_pen: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Candidate group size; 0 = 2M per sample.
    #[arg(long, default_value_t = 0)]
    group_size: usize,
    #[arg(long, default_value_t = 0.05)]
    tau_rl: f64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Pre-built stage-2 samples file; built from the corpus when omitted.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Task name or `all` for the ten-task suite.
    #[arg(long)]
    task: String,
    /// Nested dims to sweep, e.g. `8,32,64,128`.
    #[arg(long, default_value = "128")]
    dims: String,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    #[arg(long, default_value_t = 9090)]
    seed: u64,
    /// Noise candidates per note2note query.
    #[arg(long, default_value_t = 10)]
    noise: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Granularity {
    Notes,
    Items,
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Granularity::Notes)]
    granularity: Granularity,
    /// Coarse store dim (must be a nested dim); 0 disables.
    #[arg(long, default_value_t = 0)]
    k_coarse: usize,
    /// Cap on indexed vectors; 0 = all.
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct BackcheckArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus-format JSONL of query notes.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Corpus-format JSONL of incoming notes.
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Updated index path; defaults to overwriting --index.
    #[arg(long)]
    index_out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildGalleryArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    per_category: usize,
    /// Corpus-format JSONL used as the calibration traffic sample.
    #[arg(long)]
    traffic: PathBuf,
    #[arg(long, default_value_t = 10)]
    target_matches: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 64)]
    coords: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::BuildPairs(a) => cmd_build_pairs(a),
        Command::TrainSft(a) => cmd_train_sft(a),
        Command::TrainRl(a) => cmd_train_rl(a),
        Command::Eval(a) => cmd_eval(a),
        Command::IndexBuild(a) => cmd_index_build(a),
        Command::Backcheck(a) => cmd_backcheck(a),
        Command::Verify(a) => cmd_verify(a),
        Command::BuildGallery(a) => cmd_build_gallery(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::validation(format!("bad list entry `{t}`")))
        })
        .collect()
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => GenConfig::read_json(p)?,
        None => GenConfig::default(),
    };
    let (corpus, ledger) = gen_corpus(&cfg)?;
    write_corpus_dir(&a.out, &cfg, &corpus, &ledger)?;
    println!(
        "wrote {} notes (d_raw {}, digest {}) to {}",
        corpus.notes.len(),
        corpus.d_raw,
        &corpus.config_digest[..12],
        a.out.display()
    );
    Ok(())
}

fn parse_reference(spec: &str, gen_cfg: &GenConfig) -> Result<ReferenceEncoder> {
    match spec {
        "aligned" => Ok(ReferenceEncoder::Aligned(Projections::derive(gen_cfg))),
        "raw" => Ok(ReferenceEncoder::Raw),
        other => {
            if let Some(path) = other.strip_prefix("ckpt:") {
                Ok(ReferenceEncoder::Checkpoint(Box::new(EncoderParams::load(
                    Path::new(path),
                )?)))
            } else {
                Err(Error::validation(format!(
                    "unknown reference encoder `{other}` (expected aligned, raw, or ckpt:<path>)"
                )))
            }
        }
    }
}

fn split_notes(
    split: SplitArg,
    gen_cfg: &GenConfig,
    corpus: &Corpus,
) -> Option<BTreeSet<u64>> {
    match split {
        SplitArg::Train => Some(train_notes(gen_cfg, corpus)),
        SplitArg::Holdout => Some(holdout_notes(gen_cfg, corpus)),
        SplitArg::All => None,
    }
}

fn cmd_build_pairs(a: BuildPairsArgs) -> Result<()> {
    let (gen_cfg, corpus) = read_corpus_dir(&a.corpus)?;
    let ledger = read_ledger(&a.corpus)?;
    let annot = Annotator::new(&gen_cfg, &ledger);
    let notes = split_notes(a.split, &gen_cfg, &corpus);
    let opts = notemb::pairs::PairOptions {
        seed: a.seed,
        max_per_task: a.max_per_task,
        notes,
    };

    if a.task == "note2note" {
        let note_set = opts
            .notes
            .clone()
            .unwrap_or_else(|| corpus.notes.iter().map(|n| n.id).collect());
        let samples = build_stage2_samples(&corpus, &gen_cfg, &note_set, a.group_size, a.seed)?;
        write_stage2_jsonl(&a.out, &samples)?;
        println!("wrote {} stage-2 samples to {}", samples.len(), a.out.display());
        return Ok(());
    }

    let tasks: Vec<TaskType> = if a.task == "all" {
        TaskType::STAGE1.to_vec()
    } else {
        vec![a.task.parse()?]
    };
    let mining = MiningConfig::new(
        a.tau_min,
        a.tau_max,
        a.k_neg,
        parse_reference(&a.reference, &gen_cfg)?,
    )?;
    let strategy = match a.mining {
        MiningArg::Band => MiningStrategy::Band,
        MiningArg::Random => MiningStrategy::Random,
    };
    let mut all = Vec::new();
    for task in tasks {
        let pairs = build_pairs_with_negatives(&corpus, &annot, task, &opts, &mining, strategy)?;
        eprintln!("{task}: {} pairs", pairs.len());
        all.extend(pairs);
    }
    write_pairs_jsonl(&a.out, &all)?;
    println!("wrote {} pairs to {}", all.len(), a.out.display());
    Ok(())
}

fn cmd_train_sft(a: TrainSftArgs) -> Result<()> {
    let (_, corpus) = read_corpus_dir(&a.corpus)?;
    let pairs = read_pairs_jsonl(&a.pairs)?;
    let cfg = SftConfig {
        dims: parse_usize_list(&a.dims)?,
        d_hid: a.d_hid,
        tau: a.temp,
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        warmup_ratio: a.warmup,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    let ckpt_base = a.out.clone();
    let mut sink = move |step: usize, params: &EncoderParams, opt: &notemb::sft::OptimizerState| {
        let p = ckpt_base.with_extension(format!("step{step}.bin"));
        params.save(&p)?;
        opt.save(&p.with_extension("opt"))?;
        Ok(())
    };
    let on_ckpt: Option<(usize, &mut dyn FnMut(usize, &EncoderParams, &notemb::sft::OptimizerState) -> Result<()>)> =
        if a.ckpt_every > 0 {
            Some((a.ckpt_every, &mut sink))
        } else {
            None
        };
    let outcome = train_sft(&corpus, &pairs, &cfg, on_ckpt)?;
    outcome.params.save(&a.out)?;
    let curve_path = a
        .curve
        .unwrap_or_else(|| a.out.with_extension("curve.csv"));
    write_curve_csv(&curve_path, &cfg.dims, &outcome.curve)?;
    println!(
        "trained {} steps; final loss {:.6}; checkpoint {}",
        cfg.steps,
        outcome.curve.last().map(|r| r.total).unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_train_rl(a: TrainRlArgs) -> Result<()> {
    let (gen_cfg, corpus) = read_corpus_dir(&a.corpus)?;
    let sft_params = EncoderParams::load(&a.ckpt)?;
    let samples = match &a.samples {
        Some(p) => read_stage2_jsonl(p)?,
        None => {
            let notes = train_notes(&gen_cfg, &corpus);
            build_stage2_samples(&corpus, &gen_cfg, &notes, a.group_size, a.seed)?
        }
    };
    let cfg = GrpoConfig {
        beta: a.beta,
        tau_rl: a.tau_rl,
        group_size: a.group_size,
        lr: a.lr,
        seed: a.seed,
        epochs: a.epochs,
        reward: RewardConfig {
            c_pen: a.c_pen,
            ..RewardConfig::default()
        },
    };
    let outcome = train_rl(&samples, &corpus, &sft_params, &cfg)?;
    outcome.params.save(&a.out)?;
    let curve_path = a
        .curve
        .unwrap_or_else(|| a.out.with_extension("curve.csv"));
    write_rl_curve_csv(&curve_path, &outcome.curve)?;
    let last = outcome.curve.last();
    println!(
        "rank-tuned {} samples x {} epochs; final mean reward {:.4}; checkpoint {}",
        samples.len(),
        cfg.epochs,
        last.map(|r| r.mean_reward).unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (gen_cfg, corpus) = read_corpus_dir(&a.corpus)?;
    let ledger = read_ledger(&a.corpus)?;
    let annot = Annotator::new(&gen_cfg, &ledger);
    let params = EncoderParams::load(&a.ckpt)?;
    let tasks: Vec<TaskType> = if a.task == "all" {
        TaskType::ALL.to_vec()
    } else {
        vec![a.task.parse()?]
    };
    let eval_cfg = EvalConfig {
        ks: parse_usize_list(&a.ks)?,
        seed: a.seed,
        note2note_noise: a.noise,
    };
    let dims = parse_usize_list(&a.dims)?;
    let mut reports: Vec<MetricReport> = Vec::new();
    for &dim in &dims {
        for &task in &tasks {
            let rep = run_task_eval(&corpus, &gen_cfg, &annot, &params, task, &eval_cfg, dim)?;
            for row in &rep.rows {
                eprintln!(
                    "{} dim {} {}@{}: {:.4}",
                    task, dim, row.metric, row.k, row.value
                );
            }
            reports.push(rep);
        }
    }
    write_metrics_csv(&a.report, &reports)?;
    println!("wrote metric report to {}", a.report.display());
    Ok(())
}

/// Deterministic u64 ids for indexed units: note * 4096 + offset, offset 0
/// for the note itself, 1 title, 2 body, then image/ocr pairs by slot.
fn unit_id(note: u64, offset: u64) -> u64 {
    note * 4096 + offset
}

fn cmd_index_build(a: IndexBuildArgs) -> Result<()> {
    let (_, corpus) = read_corpus_dir(&a.corpus)?;
    let params = EncoderParams::load(&a.ckpt)?;
    let mut entries = Vec::new();
    'outer: for note in &corpus.notes {
        match a.granularity {
            Granularity::Notes => {
                let e = notemb::encoder::encode(&params, EncodeInput::Note(note))?;
                entries.push((unit_id(note.id, 0), e));
            }
            Granularity::Items => {
                if note.m() as u64 > 2040 / 2 {
                    return Err(Error::validation("note has too many slots for item ids"));
                }
                let mut units: Vec<(u64, &notemb::model::ModalItem)> = vec![
                    (unit_id(note.id, 1), &note.title),
                    (unit_id(note.id, 2), &note.body),
                ];
                for (i, img) in note.images.iter().enumerate() {
                    units.push((unit_id(note.id, 3 + 2 * i as u64), img));
                }
                for (i, ocr) in note.ocr_texts.iter().enumerate() {
                    units.push((unit_id(note.id, 4 + 2 * i as u64), ocr));
                }
                for (id, item) in units {
                    let e = notemb::encoder::encode(&params, EncodeInput::Item(item))?;
                    entries.push((id, e));
                    if a.limit > 0 && entries.len() >= a.limit {
                        break 'outer;
                    }
                }
            }
        }
        if a.limit > 0 && entries.len() >= a.limit {
            break;
        }
    }
    let k_coarse = (a.k_coarse > 0).then_some(a.k_coarse);
    let index = build_index(&entries, k_coarse, Some(&params.dims))?;
    index.save(&a.out)?;
    println!(
        "indexed {} vectors (dim {}, coarse {:?}) into {}",
        index.len(),
        index.dim,
        index.k_coarse,
        a.out.display()
    );
    Ok(())
}

fn read_notes_file(path: &Path) -> Result<Vec<std::result::Result<Note, String>>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Header lines carry no note id; skip them.
        if i == 0 && line.contains("config_digest") {
            continue;
        }
        out.push(parse_note_line(&line));
    }
    Ok(out)
}

fn parse_note_line(line: &str) -> std::result::Result<Note, String> {
    #[derive(serde::Deserialize)]
    struct NoteLine {
        id: u64,
        images: Vec<Vec<f32>>,
        ocr: Vec<Vec<f32>>,
        title: Vec<f32>,
        body: Vec<f32>,
    }
    let nl: NoteLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    notemb::model::note_from_features(nl.id, nl.images, nl.ocr, nl.title, nl.body)
        .map_err(|e| e.to_string())
}

fn cmd_backcheck(a: BackcheckArgs) -> Result<()> {
    let index = VectorIndex::load(&a.index)?;
    let params = EncoderParams::load(&a.ckpt)?;
    let notes = read_notes_file(&a.queries)?;
    let mut queries = Vec::new();
    for n in notes {
        let note = n.map_err(Error::validation)?;
        let e = notemb::encoder::encode(&params, EncodeInput::Note(&note))?;
        queries.push((format!("note:{}", note.id), e));
    }
    let report = offline_backcheck(&queries, &index, a.k)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.report)?);
    for (name, hits) in &report.per_query {
        writeln!(
            w,
            "{}",
            serde_json::to_string(&serde_json::json!({"query": name, "hits": hits}))?
        )?;
    }
    writeln!(
        w,
        "{}",
        serde_json::to_string(&serde_json::json!({
            "total_returned": report.total_returned,
            "distinct_ids": report.distinct_ids,
            "duplicates": report.duplicates,
        }))?
    )?;
    w.flush()?;
    println!(
        "backcheck: {} queries, {} returned, {} distinct, {} duplicates",
        report.per_query.len(),
        report.total_returned,
        report.distinct_ids,
        report.duplicates
    );
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let gallery = read_gallery_jsonl(&a.gallery)?;
    let mut index = VectorIndex::load(&a.index)?;
    let params = EncoderParams::load(&a.ckpt)?;
    let stream = read_notes_file(&a.stream)?;
    let run = online_verify(&stream, &gallery, &mut index, &params)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    let mut matched = 0usize;
    let mut skipped = 0usize;
    for rec in &run.records {
        if let VerifyRecord::Result(r) = rec {
            matched += usize::from(!r.matches.is_empty());
        } else {
            skipped += 1;
        }
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
    }
    w.flush()?;
    index.save(a.index_out.as_ref().unwrap_or(&a.index))?;
    println!(
        "verified {} notes ({} with matches, {} skipped, {} encodes); index now {} vectors",
        run.records.len() - skipped,
        matched,
        skipped,
        run.encode_count,
        index.len()
    );
    Ok(())
}

fn cmd_build_gallery(a: BuildGalleryArgs) -> Result<()> {
    let (_, corpus) = read_corpus_dir(&a.corpus)?;
    let params = EncoderParams::load(&a.ckpt)?;
    let mut s = Stream::new(a.seed, "gallery", &[]);
    let mut note_ids: Vec<usize> = (0..corpus.notes.len()).collect();
    s.shuffle(&mut note_ids);

    let mut entries: Vec<GalleryEntry> = Vec::new();
    let mut next_id = 1u64;
    // Images: one sampled image item per source note.
    for &i in note_ids.iter().take(a.per_category) {
        let note = &corpus.notes[i];
        let img = &note.images[s.index(note.m())];
        let e = notemb::encoder::encode(&params, EncodeInput::Item(img))?;
        entries.push(GalleryEntry {
            id: next_id,
            category: Category::Image,
            threshold: 0.0,
            embedding: e.values().iter().map(|&x| x as f32).collect(),
        });
        next_id += 1;
    }
    // Videos: notes with at least four images (image-sequence convention).
    let video_notes: Vec<&Note> = corpus.notes.iter().filter(|n| n.m() >= 4).collect();
    for k in 0..a.per_category.min(video_notes.len()) {
        let note = video_notes[(k * 7919 + a.seed as usize) % video_notes.len()];
        let e = notemb::encoder::encode(&params, EncodeInput::Note(note))?;
        entries.push(GalleryEntry {
            id: next_id,
            category: Category::Video,
            threshold: 0.0,
            embedding: e.values().iter().map(|&x| x as f32).collect(),
        });
        next_id += 1;
    }
    // Notes: full notes.
    for &i in note_ids.iter().rev().take(a.per_category) {
        let note = &corpus.notes[i];
        let e = notemb::encoder::encode(&params, EncodeInput::Note(note))?;
        entries.push(GalleryEntry {
            id: next_id,
            category: Category::Note,
            threshold: 0.0,
            embedding: e.values().iter().map(|&x| x as f32).collect(),
        });
        next_id += 1;
    }

    // Calibrate per-category thresholds against the traffic sample.
    let traffic_notes = read_notes_file(&a.traffic)?;
    let mut traffic = Vec::new();
    for n in traffic_notes {
        let note = n.map_err(Error::validation)?;
        traffic.push(notemb::encoder::encode(&params, EncodeInput::Note(&note))?);
    }
    let cal = calibrate_thresholds(&entries, &traffic, a.target_matches)?;
    for e in entries.iter_mut() {
        if let Some(&t) = cal.thresholds.get(&e.category) {
            e.threshold = t;
        }
    }
    write_gallery_jsonl(&a.out, &entries)?;
    for (cat, t) in &cal.thresholds {
        let flag = if cal.unattainable[cat] { " (unattainable target)" } else { "" };
        eprintln!("category {cat:?}: threshold {t:.4}{flag}");
    }
    println!("wrote {} gallery entries to {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let params = EncoderParams::load(&a.ckpt)?;
    // Self-contained check world matching the checkpoint's raw dimension.
    let gen_cfg = GenConfig {
        n_notes: 24,
        m_range: (2, 4),
        d_lat: params.d_raw.min(8),
        d_raw: params.d_raw,
        n_topics: 4,
        noise_sigma: 0.05,
        seed: a.seed,
    };
    let (corpus, ledger) = gen_corpus(&gen_cfg)?;
    let annot = Annotator::new(&gen_cfg, &ledger);
    let mining = default_mining(&gen_cfg);
    let opts = notemb::pairs::PairOptions {
        seed: a.seed,
        max_per_task: 3,
        notes: None,
    };
    let pairs = build_pairs_with_negatives(
        &corpus,
        &annot,
        TaskType::I2Note,
        &opts,
        &mining,
        MiningStrategy::Band,
    )?;
    let batch: Vec<&notemb::pairs::TrainingPair> = pairs.iter().collect();
    let report = grad_check(&params, &batch, &corpus, 0.02, a.h, a.tol, a.coords, a.seed)?;
    println!(
        "sft gradient check: max rel err {:.3e} over {} coords (tol {:.1e}) -> {}",
        report.max_rel_err,
        report.entries.len(),
        a.tol,
        if report.pass { "pass" } else { "FAIL" }
    );
    if !report.pass {
        return Err(Error::numeric(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_err, a.tol
        )));
    }
    Ok(())
}
