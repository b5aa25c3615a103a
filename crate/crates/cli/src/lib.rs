//! Commands behind the `alod` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use alod_core::acquisition::{write_scores_csv, Strategy};
use alod_core::al_loop::{run_comparison, run_initial_seeded, ConfigError, LoopConfig, LoopError, LoopState};
use alod_core::dataset::Dataset;
use alod_core::service::{AnnotationService, ServiceError, ServiceMode, Status};
use alod_core::synth::{render_scene, save_raster, SynthError};
use alod_core::world::{generate_world, write_rasters};
use alod_server::AppState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exit code for invalid configuration or usage.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("ALOD_GIT_DESCRIBE"), ")");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    #[serde(rename = "loop")]
    pub run: LoopConfig,
    /// Strategies compared by `compare`.
    pub strategies: Vec<Strategy>,
    pub out: PathBuf,
    pub port: u16,
    pub simulate_annotator: bool,
    /// Pause between simulated batches when serving.
    pub simulate_interval_ms: u64,
    /// Write PNG rasters for generated images.
    pub render_rasters: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run: LoopConfig::default(),
            strategies: Strategy::ALL.to_vec(),
            out: PathBuf::from("runs"),
            port: 8080,
            simulate_annotator: false,
            simulate_interval_ms: 500,
            render_rasters: false,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub cycles: Option<usize>,
    pub budget: Option<usize>,
    pub port: Option<u16>,
    pub simulate_annotator: bool,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.run.seeds = o.seeds.clone();
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        match o.strategies.as_slice() {
            [] => {}
            [one] => self.run.strategy = *one,
            many => {
                self.run.strategy = many[0];
                self.strategies = many.to_vec();
            }
        }
        if let Some(c) = o.cycles {
            self.run.cycles = c;
        }
        if let Some(b) = o.budget {
            self.run.budget = b;
        }
        if let Some(p) = o.port {
            self.port = p;
        }
        if o.simulate_annotator {
            self.simulate_annotator = true;
        }
    }

    pub fn check(&self) -> Result<(), CliError> {
        self.run.check()?;
        Ok(())
    }
}

/// Written before any other output of a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub version: String,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seeds: config.run.seeds.clone(),
            out: config.out.clone(),
            version: format!("alod {VERSION}"),
            completed: false,
            status: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    ds.save(path).map_err(|e| io_err(path, e))
}

fn first_seed(config: &Config) -> u64 {
    config.run.seeds.first().copied().unwrap_or(0)
}

/// Writes the world (`world.jsonl`, `held_out.jsonl`, `backgrounds.json`)
/// and the auxiliary set synthesized from the initial sample
/// (`auxiliary.jsonl`), optionally with rasters.
pub fn cmd_generate(config: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    config.check()?;
    let out = &config.out;
    create_dir(out)?;
    let mut manifest = RunManifest::new("generate", config_path, config);
    manifest.write(out)?;
    let seed = first_seed(config);
    let mut world = generate_world(&config.run.world, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let store = if config.render_rasters {
        let dir = out.join("rasters");
        create_dir(&dir)?;
        Some(write_rasters(&mut world, &dir, seed)?)
    } else {
        None
    };
    let state = alod_core::al_loop::run_initial(&config.run, world.clone(), seed)?;
    let mut aux = state.auxiliary.clone();
    if let Some(store) = &store {
        for r in aux.records.values_mut() {
            let Some(scene) = &r.scene else { continue };
            let uri = format!("aux_{}.png", r.id);
            save_raster(&render_scene(scene, store)?, &store.path_of(&uri))?;
            r.uri = Some(uri);
        }
    }
    save_dataset(&world.train, &out.join("world.jsonl"))?;
    save_dataset(&world.held_out, &out.join("held_out.jsonl"))?;
    write_json(&out.join("backgrounds.json"), &world.backgrounds)?;
    save_dataset(&aux, &out.join("auxiliary.jsonl"))?;
    manifest.completed = true;
    manifest.write(out)
}

/// Drives one seeded run to the end, writing the acquisition scores of
/// every cycle next to the loop artifacts.
pub fn simulate_seed(config: &Config, seed: u64, dir: &Path) -> Result<LoopState, CliError> {
    create_dir(dir)?;
    let mut state = run_initial_seeded(&config.run, seed)?;
    let scores_dir = dir.join("scores");
    create_dir(&scores_dir)?;
    while !state.finished() {
        let batch = state.begin_cycle()?;
        let path = scores_dir.join(format!("cycle_{}.csv", batch.t + 1));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_scores_csv(&batch.scores, file).map_err(|e| io_err(&path, e))?;
        let sessions = state.annotate_simulated(&batch);
        state.complete_cycle(&batch, sessions)?;
    }
    state.write_artifacts(dir)?;
    Ok(state)
}

/// One simulated run per configured seed under `<out>/seed_<s>`.
pub fn cmd_simulate(config: &Config, config_path: Option<&Path>) -> Result<Vec<LoopState>, CliError> {
    config.check()?;
    create_dir(&config.out)?;
    let mut manifest = RunManifest::new("simulate", config_path, config);
    manifest.write(&config.out)?;
    let mut states = Vec::new();
    for &seed in &config.run.seeds {
        let dir = config.out.join(format!("seed_{seed}"));
        let state = simulate_seed(config, seed, &dir)?;
        let last = state.reports.last().expect("t = 0 report");
        println!(
            "seed {seed}: strategy {} t={} ap50={:.4} ap={:.4} annotation={:.1}s",
            config.run.strategy, last.t, last.ap50, last.ap, last.cumulative_seconds
        );
        states.push(state);
    }
    manifest.completed = true;
    manifest.write(&config.out)?;
    Ok(states)
}

pub fn cmd_compare(config: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    config.check()?;
    if config.strategies.len() < 2 {
        return Err(ConfigError::TooFewStrategies.into());
    }
    create_dir(&config.out)?;
    let mut manifest = RunManifest::new("compare", config_path, config);
    manifest.write(&config.out)?;
    let cmp = run_comparison(&config.run, &config.strategies)?;
    cmp.write_artifacts(&config.out)?;
    println!(
        "{:<12} {:>3} {:>10} {:>9} {:>10}",
        "strategy", "t", "mean_ap50", "std_ap50", "mean_ap"
    );
    for row in cmp.summary() {
        println!(
            "{:<12} {:>3} {:>10.4} {:>9.4} {:>10.4}",
            row.strategy.name(),
            row.t,
            row.mean_ap50,
            row.std_ap50,
            row.mean_ap
        );
    }
    manifest.completed = true;
    manifest.write(&config.out)
}

/// Warms up a loop, hosts the annotation API until `shutdown` resolves and
/// writes the final manifest and run artifacts.
pub async fn cmd_serve(
    config: &Config,
    config_path: Option<&Path>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<RunManifest, CliError> {
    config.check()?;
    let out = &config.out;
    create_dir(out)?;
    let mut manifest = RunManifest::new("serve", config_path, config);
    manifest.write(out)?;

    let seed = first_seed(config);
    let mut world = generate_world(&config.run.world, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let raster_root = if config.render_rasters {
        let dir = out.join("rasters");
        create_dir(&dir)?;
        write_rasters(&mut world, &dir, seed)?;
        Some(dir)
    } else {
        None
    };
    let state = alod_core::al_loop::run_initial(&config.run, world, seed)?;
    let mode = if config.simulate_annotator {
        ServiceMode::Simulation
    } else {
        ServiceMode::Live
    };
    let app = AppState::new(AnnotationService::new(state, mode)?, raster_root);

    let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.port))
        .await
        .map_err(|e| CliError::Runtime(format!("cannot bind port {}: {e}", config.port)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
    tracing::info!(%addr, ?mode, "serving");
    write_json(&out.join("address.json"), &addr.to_string())?;

    let driver = mode.eq(&ServiceMode::Simulation).then(|| {
        let app = app.clone();
        let pause = Duration::from_millis(config.simulate_interval_ms);
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(pause).await;
                let done = {
                    let mut service = app.lock();
                    match service.advance() {
                        Ok(report) => {
                            tracing::info!(t = report.t, ap50 = report.ap50, "simulated batch promoted");
                            false
                        }
                        Err(ServiceError::Finished(_)) => true,
                        Err(e) => {
                            tracing::error!("simulated batch failed: {e}");
                            true
                        }
                    }
                };
                if done {
                    break;
                }
            }
        })
    });

    alod_server::serve(listener, app.clone(), shutdown)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(d) = driver {
        d.abort();
    }
    let service = app.lock();
    service.state().write_artifacts(&out.join("run"))?;
    manifest.status = Some(service.status());
    manifest.completed = service.status().terminal;
    manifest.write(out)?;
    Ok(manifest)
}
