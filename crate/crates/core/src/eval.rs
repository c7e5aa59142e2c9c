//! Evaluation harness: seeded episode rollouts with a retry budget, success
//! rates under the seen/unseen protocol, and the Table-style benchmark
//! sweep over {1, 10, 20} demonstrations.

use crate::embed::{EncoderParams, PartitionPolicy};
use crate::error::{EngineError, Result};
use crate::fusion::FusionConfig;
use crate::policy::{act, PolicyNets};
use crate::scene::{apply_action, check_success, make_episode, render, Split, TaskSpec};
use crate::seg::{segment, DEFAULT_MIN_AREA};
use crate::train::{make_demonstrations, train_few_shot, TrainConfig};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
}

impl EvalConfig {
    pub fn new(task: &str, split: Split, seed: u64) -> EvalConfig {
        EvalConfig {
            task: task.to_string(),
            split,
            episodes: 50,
            max_steps: 5,
            seed,
            fusion: FusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 1 {
            return Err(EngineError::Param("episodes must be >= 1".into()));
        }
        if self.max_steps < 1 {
            return Err(EngineError::Param("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub steps_used: usize,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub success_rate: f64,
    pub per_episode: Vec<EpisodeRecord>,
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub engine_version: &'static str,
}

/// Worker cap from ARRANGE_THREADS (0 or unset = auto). The engine executes
/// episodes sequentially in episode order, which satisfies any cap.
pub fn worker_cap() -> usize {
    std::env::var("ARRANGE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Rolls out every episode with up to `max_steps` act/apply cycles,
/// stopping early on success.
pub fn run_eval(
    config: &EvalConfig,
    nets: &PolicyNets,
    encoders: &EncoderParams,
) -> Result<EvalReport> {
    config.validate()?;
    let task = TaskSpec::by_name(&config.task)?;
    let _ = worker_cap();
    let mut per_episode = Vec::with_capacity(config.episodes);
    let mut successes = 0usize;
    for i in 0..config.episodes {
        let ep_seed = config.seed.wrapping_add(i as u64);
        let episode = make_episode(&task, config.split, ep_seed)
            .map_err(|e| EngineError::Generation(format!("episode seed {ep_seed}: {e}")))?;
        let mut scene = episode.scene.clone();
        let mut steps_used = 0;
        let mut success = false;
        for _ in 0..config.max_steps {
            let obs = render(&scene);
            let seg = segment(&obs, [0.0; 3], DEFAULT_MIN_AREA)
                .map_err(|e| EngineError::Generation(format!("episode seed {ep_seed}: {e}")))?;
            let (pick, place) =
                act(&obs, &episode.instruction, encoders, nets, &seg, &config.fusion)
                    .map_err(|e| EngineError::Generation(format!("episode seed {ep_seed}: {e}")))?;
            scene = apply_action(
                &scene,
                pick.pose,
                (place.pose.0, place.pose.1, place.angle.degrees()),
            );
            steps_used += 1;
            if check_success(&scene, &episode) {
                success = true;
                break;
            }
        }
        if success {
            successes += 1;
        }
        per_episode.push(EpisodeRecord { seed: ep_seed, steps_used, success });
    }
    Ok(EvalReport {
        success_rate: 100.0 * successes as f64 / config.episodes as f64,
        per_episode,
        task: config.task.clone(),
        split: config.split,
        episodes: config.episodes,
        max_steps: config.max_steps,
        seed: config.seed,
        engine_version: ENGINE_VERSION,
    })
}

impl EvalReport {
    /// Machine-readable structured-text form.
    pub fn to_machine_string(&self) -> String {
        let mut out = String::new();
        out.push_str("arrange-eval/1\n");
        out.push_str(&format!("engine {}\n", self.engine_version));
        out.push_str(&format!("task {}\n", self.task));
        out.push_str(&format!("split {}\n", self.split.as_str()));
        out.push_str(&format!("episodes {}\n", self.episodes));
        out.push_str(&format!("max_steps {}\n", self.max_steps));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("success_rate {:.4}\n", self.success_rate));
        for r in &self.per_episode {
            out.push_str(&format!(
                "episode {} steps {} success {}\n",
                r.seed,
                r.steps_used,
                if r.success { 1 } else { 0 }
            ));
        }
        out.push_str("end\n");
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub task: String,
    pub demos: usize,
    pub seen_rate: f64,
    pub unseen_rate: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub episodes: usize,
    pub train_steps: usize,
    pub rows: Vec<BenchmarkRow>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub tasks: Vec<String>,
    pub demo_counts: Vec<usize>,
    pub episodes: usize,
    pub max_steps: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub partition: PartitionPolicy,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            tasks: TaskSpec::all_names().iter().map(|s| s.to_string()).collect(),
            demo_counts: vec![1, 10, 20],
            episodes: 5,
            max_steps: 5,
            train_steps: 40,
            learning_rate: 0.02,
            partition: PartitionPolicy::Both,
            seed: 0,
        }
    }
}

/// Trains fresh parameters per (task, demo count) from an untrained start
/// and evaluates both splits.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let mut rows = Vec::new();
    for task_name in &config.tasks {
        let task = TaskSpec::by_name(task_name)?;
        for &demos in &config.demo_counts {
            // Untrained start: random heads (zero heads are a dead point for
            // the placement stage) and near-aligned encoders.
            let base_nets = PolicyNets::random_init(config.seed);
            let base_enc = EncoderParams::oracle_aligned(config.seed);
            let train_cfg = TrainConfig {
                steps: config.train_steps,
                learning_rate: config.learning_rate,
                partition: crate::embed::resolve_partition(config.partition),
                seed: config.seed,
                ..TrainConfig::default()
            };
            let demo_set = make_demonstrations(&task, Split::Seen, demos, config.seed)?;
            let (nets, enc, _) = train_few_shot(&demo_set, &base_nets, &base_enc, &train_cfg)
                .map_err(|e| {
                    EngineError::Generation(format!("benchmark {task_name}/{demos} demos: {e}"))
                })?;
            let mut rates = [0.0; 2];
            for (i, split) in [Split::Seen, Split::Unseen].into_iter().enumerate() {
                let eval_cfg = EvalConfig {
                    task: task_name.clone(),
                    split,
                    episodes: config.episodes,
                    max_steps: config.max_steps,
                    seed: config.seed.wrapping_add(1000),
                    fusion: FusionConfig::default(),
                };
                rates[i] = run_eval(&eval_cfg, &nets, &enc)
                    .map_err(|e| {
                        EngineError::Generation(format!("benchmark {task_name}/{demos} demos: {e}"))
                    })?
                    .success_rate;
            }
            rows.push(BenchmarkRow {
                task: task_name.clone(),
                demos,
                seen_rate: rates[0],
                unseen_rate: rates[1],
            });
        }
    }
    Ok(BenchmarkReport {
        seed: config.seed,
        episodes: config.episodes,
        train_steps: config.train_steps,
        rows,
    })
}

impl BenchmarkReport {
    /// Machine-readable structured-text form (the acceptance-test surface).
    pub fn to_machine_string(&self) -> String {
        let mut out = String::new();
        out.push_str("arrange-report/1\n");
        out.push_str(&format!("engine {ENGINE_VERSION}\n"));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("episodes {}\n", self.episodes));
        out.push_str(&format!("train_steps {}\n", self.train_steps));
        for r in &self.rows {
            out.push_str(&format!(
                "row {} {} seen {:.4} unseen {:.4} gap {:.4}\n",
                r.task,
                r.demos,
                r.seen_rate,
                r.unseen_rate,
                r.seen_rate - r.unseen_rate
            ));
        }
        out.push_str("end\n");
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>6} {:>8} {:>8} {:>8}\n",
            "task", "demos", "seen", "unseen", "gap"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>6} {:>7.1}% {:>7.1}% {:>7.1}%\n",
                r.task,
                r.demos,
                r.seen_rate,
                r.unseen_rate,
                r.seen_rate - r.unseen_rate
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_eval_is_perfect_on_small_sample() {
        let nets = PolicyNets::oracle_init();
        let enc = EncoderParams::oracle_aligned(0);
        let cfg = EvalConfig {
            episodes: 10,
            ..EvalConfig::new("put-block-in-bowl", Split::Seen, 100)
        };
        let report = run_eval(&cfg, &nets, &enc).unwrap();
        assert_eq!(report.success_rate, 100.0);
        assert!(report.per_episode.iter().all(|r| r.success && r.steps_used <= 5));
    }

    #[test]
    fn success_rate_matches_recount() {
        let nets = PolicyNets::zero_init();
        let enc = EncoderParams::oracle_aligned(0).perturbed(0.3, 1);
        let cfg = EvalConfig {
            episodes: 8,
            max_steps: 2,
            ..EvalConfig::new("put-block-in-bowl", Split::Seen, 3)
        };
        let report = run_eval(&cfg, &nets, &enc).unwrap();
        let recount =
            100.0 * report.per_episode.iter().filter(|r| r.success).count() as f64 / 8.0;
        assert_eq!(report.success_rate, recount);
        assert!(report.to_machine_string().contains("max_steps 2"));
        assert!(report.to_machine_string().contains("episodes 8"));
    }

    #[test]
    fn eval_is_deterministic() {
        let nets = PolicyNets::oracle_init();
        let enc = EncoderParams::oracle_aligned(0);
        let cfg = EvalConfig {
            episodes: 5,
            ..EvalConfig::new("pack-block-in-box", Split::Unseen, 17)
        };
        let a = run_eval(&cfg, &nets, &enc).unwrap();
        let b = run_eval(&cfg, &nets, &enc).unwrap();
        assert_eq!(a.to_machine_string(), b.to_machine_string());
    }

    #[test]
    fn benchmark_report_structure_and_determinism() {
        let cfg = BenchmarkConfig {
            tasks: vec!["put-block-in-bowl".into()],
            demo_counts: vec![1, 2],
            episodes: 2,
            max_steps: 2,
            train_steps: 2,
            ..BenchmarkConfig::default()
        };
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a.to_machine_string(), b.to_machine_string());
        assert_eq!(a.rows.len(), 2);
        let m = a.to_machine_string();
        assert!(m.contains("row put-block-in-bowl 1 seen"));
        assert!(m.contains("gap"));
        assert!(a.to_table().contains("unseen"));
    }

    #[test]
    fn invalid_configs_error() {
        let cfg = EvalConfig { episodes: 0, ..EvalConfig::new("put-block-in-bowl", Split::Seen, 0) };
        assert!(cfg.validate().is_err());
        let cfg =
            EvalConfig { max_steps: 0, ..EvalConfig::new("put-block-in-bowl", Split::Seen, 0) };
        assert!(cfg.validate().is_err());
        let nets = PolicyNets::oracle_init();
        let enc = EncoderParams::oracle_aligned(0);
        let bad = EvalConfig::new("no-such-task", Split::Seen, 0);
        assert!(run_eval(&bad, &nets, &enc).is_err());
    }
}
