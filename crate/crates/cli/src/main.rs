//! `arrange` — command-line harness for the arrangement policy engine.
//!
//! Subcommands: `gen` (emit an episode corpus), `train` (demonstrations to a
//! checkpoint), `eval` (checkpoint to a success-rate report), `infer` (one
//! scene to a decision record plus affordance dumps), `bench` (the full
//! task × demo-count sweep).
//!
//! Every subcommand accepts `--config <file>` with `key value` lines;
//! command-line flags override file values. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arrange_core::embed::{encode_text, encode_visual, resolve_partition, EncoderParams, PartitionPolicy};
use arrange_core::eval::{run_benchmark, run_eval, BenchmarkConfig, EvalConfig};
use arrange_core::formats::{
    read_checkpoint, read_embeddings, read_episode, read_label_pgm, write_checkpoint,
    write_confidence_pgm, write_embeddings, write_episode, write_label_pgm, write_ppm,
    write_score_pgm,
};
use arrange_core::fusion::{confidence_map, fuse, FusionConfig};
use arrange_core::policy::{
    extract_pick_crop, filter_text, predict_pick, predict_place, PolicyNets, INSTANCE_CROP_PAD,
};
use arrange_core::scene::{make_episode, render, Split, TaskSpec};
use arrange_core::seg::{crop, from_label_map, segment, to_label_map, SegmentationResult, DEFAULT_MIN_AREA};
use arrange_core::train::{make_demonstrations, train_few_shot, TrainConfig};

#[derive(Parser)]
#[command(name = "arrange", about = "Language-conditioned arrangement policy engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an episode corpus (scene files, observations, label maps).
    Gen(GenArgs),
    /// Train few-shot on demonstrations and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the oracle) and print a report.
    Eval(EvalArgs),
    /// Run the policy on one scene file and emit a decision record.
    Infer(InferArgs),
    /// Full benchmark sweep over tasks and demo counts.
    Bench(BenchArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Task name (put-block-in-bowl, pack-block-in-box, separating-piles)
    #[arg(long)]
    task: Option<String>,
    /// Color split: seen or unseen
    #[arg(long)]
    split: Option<String>,
    /// Number of demonstrations
    #[arg(long)]
    demos: Option<usize>,
    /// Number of evaluation episodes
    #[arg(long)]
    episodes: Option<usize>,
    /// Per-episode step budget
    #[arg(long)]
    max_steps: Option<usize>,
    /// Base RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Gradient-descent steps
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Encoder parameter partition (none, text_ffn_bias_only,
    /// visual_layernorm_only, both, all)
    #[arg(long)]
    partition: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; omitted = oracle-initialized parameters
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Scene/episode file (arrange-scene/1)
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Instruction override (defaults to the episode's instruction)
    #[arg(long)]
    instruction: Option<String>,
    /// Checkpoint file; omitted = oracle-initialized parameters
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// External segmentation: P5 label PGM replacing the built-in segmenter
    #[arg(long)]
    masks: Option<PathBuf>,
    /// External embeddings: arrange-emb/1 file (id 0 = global, ids = instances)
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Training steps per benchmark cell
    #[arg(long)]
    train_steps: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

// ------------------------------------------------------------ config merge

/// Parses a `key value` config file (blank lines and `#` comments ignored).
fn load_config(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once(char::is_whitespace) {
            Some((k, v)) => {
                map.insert(k.to_string(), v.trim().to_string());
            }
            None => {
                return Err(CliError::Usage(format!(
                    "config {} line {}: expected 'key value', got '{line}'",
                    path.display(),
                    n + 1
                )));
            }
        }
    }
    Ok(map)
}

/// Fully resolved settings: flag > config-file entry > default.
struct Settings {
    task: String,
    split: Split,
    demos: usize,
    episodes: usize,
    max_steps: usize,
    seed: u64,
    out: Option<PathBuf>,
    cfg: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(common: &Common, default_episodes: usize) -> CliResult<Settings> {
        let cfg = match &common.config {
            Some(p) => load_config(p)?,
            None => BTreeMap::new(),
        };
        let get = |key: &str| cfg.get(key).cloned();
        let task = common
            .task
            .clone()
            .or_else(|| get("task"))
            .unwrap_or_else(|| "put-block-in-bowl".to_string());
        TaskSpec::by_name(&task).map_err(usage)?;
        let split_s = common
            .split
            .clone()
            .or_else(|| get("split"))
            .unwrap_or_else(|| "seen".to_string());
        let split = Split::parse(&split_s).map_err(usage)?;
        let demos = resolve_num(common.demos, get("demos"), 10, "demos")?;
        let episodes = resolve_num(common.episodes, get("episodes"), default_episodes, "episodes")?;
        let max_steps = resolve_num(common.max_steps, get("max_steps"), 5, "max_steps")?;
        let seed = resolve_num(common.seed, get("seed"), 0, "seed")?;
        let out = common.out.clone().or_else(|| get("out").map(PathBuf::from));
        Ok(Settings { task, split, demos, episodes, max_steps, seed, out, cfg })
    }
}

fn resolve_num<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: Option<String>,
    default: T,
    name: &str,
) -> CliResult<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg {
        Some(s) => s
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid value '{s}' for {name}"))),
        None => Ok(default),
    }
}

fn ensure_out(settings: &Settings, sub: &str) -> CliResult<PathBuf> {
    let dir = settings
        .out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{sub} requires --out <dir>")))?;
    fs::create_dir_all(&dir).map_err(runtime)?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    fs::write(dir.join(name), bytes)
        .map_err(|e| CliError::Runtime(format!("writing {name}: {e}")))
}

// ------------------------------------------------------------- subcommands

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let s = Settings::resolve(&args.common, 10)?;
    let out = ensure_out(&s, "gen")?;
    let task = TaskSpec::by_name(&s.task).map_err(usage)?;
    for i in 0..s.episodes {
        let seed = s.seed.wrapping_add(i as u64);
        let ep = make_episode(&task, s.split, seed).map_err(runtime)?;
        let obs = render(&ep.scene);
        let seg = segment(&obs, [0.0; 3], DEFAULT_MIN_AREA).map_err(runtime)?;
        let stem = format!("ep_{seed:06}");
        write_file(&out, &format!("{stem}.scene"), write_episode(&ep).as_bytes())?;
        write_file(&out, &format!("{stem}.ppm"), &write_ppm(&obs).map_err(runtime)?)?;
        let labels = to_label_map(&seg);
        let pgm = write_label_pgm(obs.height, obs.width, &labels).map_err(runtime)?;
        write_file(&out, &format!("{stem}.labels.pgm"), &pgm)?;
    }
    println!("wrote {} episodes to {}", s.episodes, out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let s = Settings::resolve(&args.common, 50)?;
    let task = TaskSpec::by_name(&s.task).map_err(usage)?;
    let steps = resolve_num(args.steps, s.cfg.get("steps").cloned(), 100, "steps")?;
    let lr = resolve_num(args.lr, s.cfg.get("learning_rate").cloned(), 0.05, "learning_rate")?;
    let partition_s = args
        .partition
        .clone()
        .or_else(|| s.cfg.get("partition").cloned())
        .unwrap_or_else(|| "both".to_string());
    let partition = PartitionPolicy::parse(&partition_s).map_err(usage)?;
    let demos = make_demonstrations(&task, s.split, s.demos, s.seed).map_err(runtime)?;
    let config = TrainConfig {
        steps,
        learning_rate: lr,
        partition: resolve_partition(partition),
        seed: s.seed,
        ..TrainConfig::default()
    };
    // Untrained start: random heads (zero heads are a dead point for the
    // placement stage) and near-aligned encoders.
    let base_nets = PolicyNets::random_init(s.seed);
    let base_enc = EncoderParams::oracle_aligned(s.seed);
    let (nets, enc, trace) =
        train_few_shot(&demos, &base_nets, &base_enc, &config).map_err(runtime)?;
    let ckpt = write_checkpoint(&nets, &enc, partition, s.seed);
    match &s.out {
        Some(_) => {
            let out = ensure_out(&s, "train")?;
            write_file(&out, "checkpoint.ckpt", ckpt.as_bytes())?;
            println!(
                "trained {} steps on {} demos; loss {:.6} -> {:.6}; checkpoint at {}",
                steps,
                s.demos,
                trace.first().copied().unwrap_or(f64::NAN),
                trace.last().copied().unwrap_or(f64::NAN),
                out.join("checkpoint.ckpt").display()
            );
        }
        None => print!("{ckpt}"),
    }
    Ok(())
}

fn load_params(
    ckpt: &Option<PathBuf>,
    seed: u64,
) -> CliResult<(PolicyNets, EncoderParams)> {
    match ckpt {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", path.display())))?;
            let (nets, enc, _, _) = read_checkpoint(&text).map_err(runtime)?;
            Ok((nets, enc))
        }
        None => Ok((PolicyNets::oracle_init(), EncoderParams::oracle_aligned(seed))),
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let s = Settings::resolve(&args.common, 50)?;
    let config = EvalConfig {
        task: s.task.clone(),
        split: s.split,
        episodes: s.episodes,
        max_steps: s.max_steps,
        seed: s.seed,
        fusion: FusionConfig::default(),
    };
    config.validate().map_err(usage)?;
    let (nets, enc) = load_params(&args.ckpt, s.seed)?;
    let report = run_eval(&config, &nets, &enc).map_err(runtime)?;
    let text = report.to_machine_string();
    print!("{text}");
    if s.out.is_some() {
        let out = ensure_out(&s, "eval")?;
        write_file(&out, "report.txt", text.as_bytes())?;
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CliResult<()> {
    let s = Settings::resolve(&args.common, 1)?;
    let scene_path = args
        .scene
        .clone()
        .or_else(|| s.cfg.get("scene").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("infer requires --scene <file>".to_string()))?;
    let text = fs::read_to_string(&scene_path)
        .map_err(|e| CliError::Runtime(format!("scene {}: {e}", scene_path.display())))?;
    let ep = read_episode(&text).map_err(runtime)?;
    let instruction = args
        .instruction
        .clone()
        .or_else(|| s.cfg.get("instruction").cloned())
        .unwrap_or_else(|| ep.instruction.clone());
    let (nets, enc) = load_params(&args.ckpt, s.seed)?;
    let obs = render(&ep.scene);

    let seg: SegmentationResult = match &args.masks {
        Some(path) => {
            let bytes = fs::read(path)
                .map_err(|e| CliError::Runtime(format!("masks {}: {e}", path.display())))?;
            let (h, w, labels) = read_label_pgm(&bytes).map_err(runtime)?;
            from_label_map(h, w, &labels).map_err(runtime)?
        }
        None => segment(&obs, [0.0; 3], DEFAULT_MIN_AREA).map_err(runtime)?,
    };

    // Instance + global embeddings: external file (id 0 = global) or the
    // built-in visual encoder.
    let (instance_embs, global) = match &args.embeddings {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("embeddings {}: {e}", path.display())))?;
            let records = read_embeddings(&text).map_err(runtime)?;
            let by_id: BTreeMap<u32, _> =
                records.into_iter().map(|(id, e)| (id, e)).collect();
            let global = by_id
                .get(&0)
                .cloned()
                .ok_or_else(|| CliError::Runtime("embedding file lacks global record id 0".into()))?;
            let mut embs = Vec::with_capacity(seg.instances.len());
            for inst in &seg.instances {
                let e = by_id.get(&inst.id).cloned().ok_or_else(|| {
                    CliError::Runtime(format!("embedding file lacks instance id {}", inst.id))
                })?;
                embs.push(e);
            }
            (embs, global)
        }
        None => {
            let mut embs = Vec::with_capacity(seg.instances.len());
            for inst in &seg.instances {
                let c = crop(&obs, inst, INSTANCE_CROP_PAD);
                embs.push(encode_visual(&c, &enc).map_err(runtime)?);
            }
            (embs, encode_visual(&obs, &enc).map_err(runtime)?)
        }
    };

    let fusion = FusionConfig::default();
    let pair = filter_text(&instruction).map_err(runtime)?;
    let (fused, _) = fuse(&instance_embs, &global, &fusion).map_err(runtime)?;
    let e_tl = encode_text(&pair.tl_query, &enc).map_err(runtime)?;
    let e_rd = encode_text(&pair.rd_query, &enc).map_err(runtime)?;
    let m_tl = confidence_map(&seg, &fused, &e_tl).map_err(runtime)?;
    let m_rd = confidence_map(&seg, &fused, &e_rd).map_err(runtime)?;
    let pick = predict_pick(&obs, &m_tl, &nets).map_err(runtime)?;
    let pick_crop = extract_pick_crop(&obs, pick.pose, nets.crop_size).map_err(runtime)?;
    let place = predict_place(&obs, &m_rd, &pick_crop, &nets).map_err(runtime)?;

    let mut record = String::new();
    record.push_str("arrange-decision/1\n");
    record.push_str(&format!("instruction {instruction}\n"));
    record.push_str(&format!("tl_query {}\n", pair.tl_query.raw));
    record.push_str(&format!("rd_query {}\n", pair.rd_query.raw));
    record.push_str(&format!("pick {} {}\n", pick.pose.0, pick.pose.1));
    record.push_str(&format!(
        "place {} {} {}\n",
        place.pose.0,
        place.pose.1,
        place.angle.degrees()
    ));
    record.push_str(&format!("instances {}\n", seg.instances.len()));
    for (inst, (s_tl, s_rd)) in seg
        .instances
        .iter()
        .zip(m_tl.scores.iter().zip(m_rd.scores.iter()))
    {
        record.push_str(&format!("instance {} tl {s_tl:.9} rd {s_rd:.9}\n", inst.id));
    }
    record.push_str("end\n");
    print!("{record}");

    if s.out.is_some() {
        let out = ensure_out(&s, "infer")?;
        write_file(&out, "decision.txt", record.as_bytes())?;
        write_file(&out, "obs.ppm", &write_ppm(&obs).map_err(runtime)?)?;
        write_file(&out, "conf_tl.pgm", &write_confidence_pgm(&m_tl.map).map_err(runtime)?)?;
        write_file(&out, "conf_rd.pgm", &write_confidence_pgm(&m_rd.map).map_err(runtime)?)?;
        write_file(&out, "pick_scores.pgm", &write_score_pgm(&pick.score_map).map_err(runtime)?)?;
        let best = &place.score_volume[place.angle.index() - 1];
        write_file(&out, "place_scores.pgm", &write_score_pgm(best).map_err(runtime)?)?;
        // Export side of the encoder bridge: re-importable with --embeddings.
        let mut records: Vec<(u32, &arrange_core::embed::EmbeddingVector)> = vec![(0, &global)];
        for (inst, e) in seg.instances.iter().zip(instance_embs.iter()) {
            records.push((inst.id, e));
        }
        let emb_text = write_embeddings(&records).map_err(runtime)?;
        write_file(&out, "embeddings.emb", emb_text.as_bytes())?;
        let labels = to_label_map(&seg);
        let pgm = write_label_pgm(obs.height, obs.width, &labels).map_err(runtime)?;
        write_file(&out, "masks.pgm", &pgm)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let s = Settings::resolve(&args.common, 5)?;
    let tasks = match &args.common.task {
        Some(t) => vec![t.clone()],
        None => match s.cfg.get("task") {
            Some(t) => vec![t.clone()],
            None => TaskSpec::all_names().iter().map(|n| n.to_string()).collect(),
        },
    };
    let train_steps =
        resolve_num(args.train_steps, s.cfg.get("train_steps").cloned(), 5, "train_steps")?;
    let lr = resolve_num(args.lr, s.cfg.get("learning_rate").cloned(), 0.05, "learning_rate")?;
    let config = BenchmarkConfig {
        tasks,
        episodes: s.episodes,
        max_steps: s.max_steps,
        train_steps,
        learning_rate: lr,
        seed: s.seed,
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark(&config).map_err(runtime)?;
    print!("{}", report.to_table());
    if s.out.is_some() {
        let out = ensure_out(&s, "bench")?;
        write_file(&out, "report.txt", report.to_machine_string().as_bytes())?;
        write_file(&out, "table.txt", report.to_table().as_bytes())?;
    }
    Ok(())
}
