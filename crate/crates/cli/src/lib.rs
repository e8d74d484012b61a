//! Front end for the simulator: scenario runs, the overwrite timing budget
//! and golden-vector regeneration.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use caiba::bus::{worst_case_overwrite_delay, BitTimingConfig, BusTopology, TimingBudget, TimingError};
use caiba::scenario::{write_outputs, ConfigError, Role, RunMetrics, RunOptions, Scenario, ScenarioConfig};
use caiba::secoc::TagWidth;
use serde::Serialize;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}: {source}")]
    Config {
        file: String,
        #[source]
        source: ConfigError,
    },
    #[error("{0}")]
    Timing(#[from] TimingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Timing(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Pool(_) => EXIT_FAILURE,
        }
    }
}

/// Settings shared by every scenario of one `run` invocation.
#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    pub configs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: bool,
    /// Probe position for the trace; defaults to the first receiver.
    pub trace_at_m: Option<f64>,
    pub seed: Option<u64>,
    pub tag_width: Option<u8>,
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub config: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub metrics: RunMetrics,
    pub elapsed: Duration,
    /// Unmet expectations; empty on success.
    pub failures: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "{} [{}]: sent {} accepted {} rejected {} aborted {} reliability {:.6} forgeries {}/{} in {:.2}s",
            m.scenario,
            self.config.display(),
            m.frames_sent,
            m.frames_accepted,
            m.frames_rejected,
            m.frames_aborted,
            m.reliability,
            m.forgeries_accepted,
            m.forgeries_attempted,
            self.elapsed.as_secs_f64(),
        );
        s.push_str(if self.passed() { " PASS" } else { " FAIL" });
        for f in &self.failures {
            let _ = write!(s, "; {f}");
        }
        s
    }
}

/// Loads a scenario and applies command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, tag_width: Option<u8>) -> Result<ScenarioConfig, CliError> {
    let config_err = |source| CliError::Config {
        file: path.display().to_string(),
        source,
    };
    let mut cfg = ScenarioConfig::load(path).map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = tag_width {
        cfg.tag_width = TagWidth::new(w).map_err(|e| config_err(ConfigError::new("tag_width", e.to_string())))?;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn default_probe(cfg: &ScenarioConfig) -> f64 {
    cfg.nodes
        .iter()
        .find(|n| n.role == Role::Receiver)
        .map_or(0.0, |n| n.position_m)
}

fn out_dir_for(req: &RunRequest, index: usize, cfg: &ScenarioConfig) -> Option<PathBuf> {
    let out = req.out.as_ref()?;
    if req.configs.len() == 1 {
        return Some(out.clone());
    }
    let stem = req.configs[index].file_stem().map(|s| s.to_string_lossy().into_owned());
    let name = stem.unwrap_or_else(|| cfg.name.clone());
    Some(out.join(format!("{index:02}-{name}")))
}

fn run_one(req: &RunRequest, index: usize, cfg: ScenarioConfig) -> Result<ScenarioReport, CliError> {
    let path = &req.configs[index];
    let opts = RunOptions {
        trace_position_m: req.trace.then(|| req.trace_at_m.unwrap_or_else(|| default_probe(&cfg))),
        ..Default::default()
    };
    let expect = cfg.expect.clone();
    let out_dir = out_dir_for(req, index, &cfg);
    let config_err = |source| CliError::Config {
        file: path.display().to_string(),
        source,
    };
    let started = Instant::now();
    let result = Scenario::new(cfg).and_then(|s| s.run(&opts)).map_err(config_err)?;
    let elapsed = started.elapsed();
    if let Some(dir) = &out_dir {
        write_outputs(&result, dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut failures = expect.failures(&result.metrics);
    if let Some(limit) = expect.max_runtime_s {
        if elapsed.as_secs_f64() > limit {
            failures.push(format!("runtime {:.2}s over {limit}s", elapsed.as_secs_f64()));
        }
    }
    Ok(ScenarioReport {
        config: path.clone(),
        out_dir,
        metrics: result.metrics,
        elapsed,
        failures,
    })
}

/// Validates every scenario first, then runs them on `jobs` threads.
/// Reports come back in input order.
pub fn run_scenarios(req: &RunRequest) -> Result<Vec<ScenarioReport>, CliError> {
    let configs = req
        .configs
        .iter()
        .map(|p| load_config(p, req.seed, req.tag_width))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.jobs.max(1))
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        configs
            .into_par_iter()
            .enumerate()
            .map(|(i, cfg)| run_one(req, i, cfg))
            .collect()
    })
}

/// Timing budget of an overwrite against the receivers' sample point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub quanta_per_bit: u16,
    pub signal_speed_ns_per_m: f64,
    #[serde(flatten)]
    pub budget: TimingBudget,
}

pub fn timing_budget(
    bitrate_bps: u32,
    bus_length_m: f64,
    transceiver_delay_ns: f64,
    quanta_per_bit: u16,
    signal_speed_ns_per_m: f64,
) -> Result<TimingReport, CliError> {
    let timing = BitTimingConfig::for_bitrate(bitrate_bps, quanta_per_bit)?;
    Ok(TimingReport {
        quanta_per_bit,
        signal_speed_ns_per_m,
        budget: worst_case_overwrite_delay(bitrate_bps, bus_length_m, &timing, transceiver_delay_ns, signal_speed_ns_per_m),
    })
}

pub const DEFAULT_SIGNAL_SPEED: f64 = BusTopology::DEFAULT_SIGNAL_SPEED;

fn ns(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

impl TimingReport {
    pub fn table(&self) -> String {
        let b = &self.budget;
        let mut s = format!(
            "bitrate {} bit/s, bus {} m, {} quanta of {} ns\n",
            b.bitrate_bps,
            b.bus_length_m,
            self.quanta_per_bit,
            ns(b.quantum_ns)
        );
        let rows = [
            ("propagation (halfway and back)", b.propagation_ns),
            ("3 quanta (sync, overwrite, back-propagation)", b.quanta_budget_ns),
            ("transceiver", b.transceiver_ns),
            ("total", b.total_ns),
            ("sample deadline", b.sample_deadline_ns),
            ("margin", b.margin_ns),
        ];
        for (label, v) in rows {
            let _ = writeln!(s, "  {label:<46} {:>10} ns", ns(v));
        }
        s.push_str(if b.pass { "PASS\n" } else { "FAIL\n" });
        s
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Regenerates the golden vector files.
pub fn write_vectors(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    caiba::vectors::write_all(out).map_err(|source| CliError::Io {
        path: out.display().to_string(),
        source,
    })
}
