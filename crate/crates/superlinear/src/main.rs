//! Command-line entry point: audits, scaling sweeps, gradient checks, the
//! toy learnability task, and the bucket simulator, each emitting CSV plus a
//! JSON run manifest. Exit codes: 0 success, 1 check/assertion failure or
//! module error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use superlinear::anchors::anchors;
use superlinear::attention::dense_attention;
use superlinear::bucket::{
    bucketize, bucketize_pass_count, prefill_workload, simulate_dispatch, sorting_baseline_cost,
};
use superlinear::config::{
    streams, substream, validate_config, AttnConfig, OpCounters, SequenceTensors,
};
use superlinear::grad::backward_layer;
use superlinear::layer::{forward_prefill, measure_scaling};
use superlinear::learn::{toy_learnability, TaskConfig};
use superlinear::span::audit_coverage;

#[derive(Parser)]
#[command(name = "superlinear", version, about = "Routed span attention reference tool")]
struct Cli {
    /// JSON config file; flags below override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV outputs and run.json.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker count: thread pool size, or simulated workers for `buckets`.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Sets both the search and span exponents.
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Spans routed per query (top-k).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Backward span factor.
    #[arg(long, global = true)]
    b: Option<f64>,
    /// Forward span factor.
    #[arg(long, global = true)]
    f: Option<f64>,
    /// Sliding-window size.
    #[arg(long, global = true)]
    w: Option<usize>,
    /// Key-block size.
    #[arg(long, global = true)]
    block: Option<usize>,
    /// Head dimension.
    #[arg(long, global = true)]
    d: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the anchor schedule for one query position.
    Anchors {
        #[arg(long)]
        i: usize,
    },
    /// Coverage audit over all query positions below L.
    Audit {
        #[arg(long = "L")]
        len: usize,
    },
    /// Counter scaling sweep with log-log exponent fits.
    Scaling {
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// Skip tensor math; count from geometry alone.
        #[arg(long)]
        geometry_only: bool,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Train the router on the planted-payload task.
    Learn {
        #[arg(long, default_value = "niah-toy")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long = "L", default_value_t = 1024)]
        len: usize,
        #[arg(long, default_value_t = 8)]
        episodes: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
    },
    /// Bucketize a prefill workload and simulate tile dispatch.
    Buckets {
        #[arg(long = "L")]
        len: usize,
        #[arg(long, default_value_t = 16)]
        capacity: usize,
    },
    /// Analytic backward vs central finite differences.
    Gradcheck {
        #[arg(long = "L", default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Forward pass vs the dense oracle (exact when w >= L).
    Equivalence {
        #[arg(long = "L")]
        len: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_snapshot: AttnConfig,
    seed: u64,
    float_width: u8,
    outputs: Vec<String>,
    timestamp: String,
}

/// Module/check failures all map to exit 1 with a one-line diagnostic.
type Failure = Box<dyn std::error::Error>;

fn fail(message: String) -> Failure {
    message.into()
}

fn resolve_config(cli: &Cli) -> Result<AttnConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => AttnConfig::from_path(path)?,
        None => AttnConfig::default(),
    };
    if let Some(p) = cli.p {
        cfg.search_exponent = p;
        cfg.span_exponent = p;
    }
    if let Some(k) = cli.k {
        cfg.top_k = k;
    }
    if let Some(b) = cli.b {
        cfg.backward_factor = b;
    }
    if let Some(f) = cli.f {
        cfg.forward_factor = f;
    }
    if let Some(w) = cli.w {
        cfg.window = w;
    }
    if let Some(bs) = cli.block {
        cfg.block_size = bs;
    }
    if let Some(d) = cli.d {
        cfg.head_dim = d;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    // Structural validation only; the audit subcommand exists precisely to
    // probe configurations that violate the coverage bounds.
    Ok(validate_config(cfg, false)?)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), Failure> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &AttnConfig,
    outputs: &[PathBuf],
) -> Result<(), Failure> {
    for path in outputs {
        if !path.exists() {
            return Err(fail(format!("missing output {}", path.display())));
        }
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_snapshot: cfg.clone(),
        seed: cfg.seed,
        float_width: 64,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    let path = out_dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let out = |name: &str| cli.out_dir.join(name);

    if let Some(workers) = cli.workers {
        if !matches!(cli.cmd, Cmd::Buckets { .. }) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global()
                .map_err(|e| fail(format!("thread pool: {e}")))?;
        }
    }

    match &cli.cmd {
        Cmd::Anchors { i } => {
            let set = anchors(*i, cfg.search_exponent);
            let rows: Vec<String> = set
                .anchors
                .iter()
                .zip(&set.stride_indices)
                .map(|(&t, &s)| format!("{i},{s},{t}"))
                .collect();
            let path = out("anchors.csv");
            write_csv(&path, "i,s,anchor", &rows)?;
            for row in &rows {
                println!("{row}");
            }
            write_manifest(&cli.out_dir, "anchors", &cfg, &[path])?;
        }
        Cmd::Audit { len } => {
            // Sequential scan so the reported failure is the smallest i with
            // its full uncovered set.
            let first_gap = (0..*len).find_map(|i| {
                let report = audit_coverage(i, &cfg);
                (!report.covered).then_some(report)
            });
            let path = out("audit.csv");
            match first_gap {
                None => {
                    println!("covered");
                    write_csv(&path, "i,uncovered_position", &[])?;
                    write_manifest(&cli.out_dir, "audit", &cfg, &[path])?;
                }
                Some(report) => {
                    println!("uncovered at i={}", report.query_pos);
                    let rows: Vec<String> = report
                        .uncovered_positions
                        .iter()
                        .map(|j| format!("{},{j}", report.query_pos))
                        .collect();
                    write_csv(&path, "i,uncovered_position", &rows)?;
                    write_manifest(&cli.out_dir, "audit", &cfg, &[path])?;
                    return Err(fail(format!(
                        "coverage audit failed at i={} ({} uncovered positions)",
                        report.query_pos,
                        report.uncovered_positions.len()
                    )));
                }
            }
        }
        Cmd::Scaling {
            lengths,
            geometry_only,
            trials,
        } => {
            let table = measure_scaling(lengths, &cfg, *trials, *geometry_only)?;
            let rows: Vec<String> = table
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{}",
                        r.len, r.anchors_scored, r.keys_attended, table.slope_search,
                        table.slope_attend
                    )
                })
                .collect();
            let path = out("scaling.csv");
            write_csv(
                &path,
                "L,anchors_scored,keys_attended,slope_search,slope_attend",
                &rows,
            )?;
            println!(
                "slope_search={} slope_attend={}",
                table.slope_search, table.slope_attend
            );
            write_manifest(&cli.out_dir, "scaling", &cfg, &[path])?;
        }
        Cmd::Learn {
            task,
            steps,
            len,
            episodes,
            lr,
        } => {
            if task != "niah-toy" {
                // Unknown task names are usage errors, same as unknown flags.
                eprintln!("unknown task `{task}` (expected `niah-toy`)");
                std::process::exit(2);
            }
            let task_cfg = TaskConfig {
                seq_len: *len,
                head_dim: cfg.head_dim.min(32),
                episodes_per_step: *episodes,
                learning_rate: *lr,
                ..TaskConfig::default()
            };
            let curve = toy_learnability(&task_cfg, &cfg, *steps, cfg.seed)?;
            let rows: Vec<String> = curve
                .iter()
                .map(|r| format!("{},{},{}", r.step, r.loss, r.routing_accuracy))
                .collect();
            let path = out("learn.csv");
            write_csv(&path, "step,loss,routing_accuracy", &rows)?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!(
                    "initial_accuracy={} final_accuracy={} final_loss={}",
                    first.routing_accuracy, last.routing_accuracy, last.loss
                );
            }
            write_manifest(&cli.out_dir, "learn", &cfg, &[path])?;
        }
        Cmd::Buckets { len, capacity } => {
            let sim_workers = cli.workers.unwrap_or(1);
            if sim_workers == 0 {
                return Err(fail("workers must be >= 1".to_string()));
            }
            let items = prefill_workload(*len, &cfg);
            let buckets = bucketize(&items, cfg.block_size);
            let stats = simulate_dispatch(&buckets, sim_workers, *capacity);
            let hist_rows: Vec<String> = stats
                .items_per_bucket
                .iter()
                .map(|(key, n)| format!("{},{},{n}", key.end_block, key.length_blocks))
                .collect();
            let hist_path = out("buckets_histogram.csv");
            write_csv(&hist_path, "end_block,length_blocks,count", &hist_rows)?;

            let row_bytes = cfg.head_dim * 8;
            let (sort_ops, permute_bytes) = sorting_baseline_cost(items.len(), row_bytes);
            let summary = format!(
                "{},{},{},{},{},{},{},{}",
                stats.num_buckets,
                stats.tiles_issued,
                stats.occupancy_proxy,
                stats.steal_events,
                stats.total_items,
                bucketize_pass_count(items.len()),
                sort_ops,
                permute_bytes
            );
            let summary_path = out("buckets_summary.csv");
            write_csv(
                &summary_path,
                "num_buckets,tiles_issued,occupancy_proxy,steal_events,total_items,bucketize_passes,sort_ops,permute_bytes",
                &[summary],
            )?;
            println!(
                "buckets={} tiles={} occupancy={} steals={}",
                stats.num_buckets, stats.tiles_issued, stats.occupancy_proxy, stats.steal_events
            );
            write_manifest(&cli.out_dir, "buckets", &cfg, &[hist_path, summary_path])?;
        }
        Cmd::Gradcheck { len, instances } => {
            let (rows, worst) = gradcheck(*len, &cfg, *instances)?;
            let path = out("gradcheck.csv");
            write_csv(&path, "instance,tensor,max_rel_error", &rows)?;
            println!("max_rel_error={worst}");
            write_manifest(&cli.out_dir, "gradcheck", &cfg, &[path])?;
            if worst > 1e-5 {
                return Err(fail(format!(
                    "gradient check failed: max relative error {worst} > 1e-5"
                )));
            }
        }
        Cmd::Equivalence { len } => {
            let mut rng = substream(cfg.seed, streams::EQUIVALENCE);
            let seq = SequenceTensors::random(*len, cfg.head_dim, &mut rng);
            let routed = forward_prefill(&seq, &cfg)?;
            let mut scratch = OpCounters::default();
            let dense = dense_attention(&seq.q, &seq.k, &seq.v, &mut scratch)?;
            let max_diff = (&routed.outputs - &dense)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            println!("max_abs_diff={max_diff}");
            let path = out("equivalence.csv");
            write_csv(
                &path,
                "L,window,max_abs_diff",
                &[format!("{len},{},{max_diff}", cfg.window)],
            )?;
            write_manifest(&cli.out_dir, "equivalence", &cfg, &[path])?;
            if cfg.window >= *len && max_diff >= 1e-12 {
                return Err(fail(format!(
                    "dense equivalence failed: max abs diff {max_diff} with w >= L"
                )));
            }
        }
    }
    Ok(())
}

/// Compares the analytic bundle against central finite differences on random
/// instances, skipping instances whose top-k margins are too small for the
/// selection set to survive the probe step.
fn gradcheck(len: usize, cfg: &AttnConfig, instances: usize) -> Result<(Vec<String>, f64), Failure> {
    use superlinear::config::gaussian_matrix;

    let h = 1e-5;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = substream(cfg.seed, streams::GRADCHECK + inst as u64);
        let mut seq = SequenceTensors::random(len, cfg.head_dim, &mut rng);
        seq.ka = gaussian_matrix(len, cfg.head_dim, &mut rng);
        let d_o = gaussian_matrix(len, cfg.head_dim, &mut rng);

        if has_near_tie(&seq, cfg, 1e-4)? {
            rows.push(format!("{inst},skipped-tie,0"));
            continue;
        }

        let bundle = backward_layer(&seq, cfg, &d_o)?;
        let loss = |s: &SequenceTensors| -> Result<f64, Failure> {
            Ok((&forward_prefill(s, cfg)?.outputs * &d_o).sum())
        };
        let tensors: [(&str, fn(&mut SequenceTensors) -> &mut ndarray::Array2<f64>, &ndarray::Array2<f64>); 5] = [
            ("d_qs", |s| &mut s.qs, &bundle.d_qs),
            ("d_q", |s| &mut s.q, &bundle.d_q),
            ("d_k", |s| &mut s.k, &bundle.d_k),
            ("d_v", |s| &mut s.v, &bundle.d_v),
            ("d_ka", |s| &mut s.ka, &bundle.d_ka),
        ];
        for (name, select, analytic) in tensors {
            let mut max_rel = 0.0f64;
            for r in 0..len {
                for c in 0..cfg.head_dim {
                    let mut plus = seq.clone();
                    select(&mut plus)[[r, c]] += h;
                    let mut minus = seq.clone();
                    select(&mut minus)[[r, c]] -= h;
                    let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                    max_rel = max_rel.max(rel);
                }
            }
            rows.push(format!("{inst},{name},{max_rel}"));
            worst = worst.max(max_rel);
        }
    }
    Ok((rows, worst))
}

/// True when any query's k-th selected score sits within `margin` of the best
/// rejected score — the non-differentiable neighborhood of the selection.
fn has_near_tie(seq: &SequenceTensors, cfg: &AttnConfig, margin: f64) -> Result<bool, Failure> {
    let out = forward_prefill(seq, cfg)?;
    for (i, decision) in out.decisions.iter().enumerate() {
        if decision.is_fallback() {
            continue;
        }
        let window = superlinear::span::window_span(i, cfg.window);
        let set = anchors(i, cfg.search_exponent);
        let cands: Vec<usize> = set
            .anchors
            .iter()
            .copied()
            .filter(|&t| window.as_ref().map_or(true, |w| t < w.lo))
            .collect();
        if cands.len() <= cfg.top_k {
            continue;
        }
        let mut scratch = OpCounters::default();
        let mut scores = superlinear::attention::search_scores(
            seq.qs.row(i),
            &seq.ka,
            &cands,
            &mut scratch,
        )?;
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if scores[cfg.top_k - 1] - scores[cfg.top_k] < margin {
            return Ok(true);
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
