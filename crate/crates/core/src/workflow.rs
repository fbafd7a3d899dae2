//! Run-directory orchestration of the pipeline stages.
//!
//! Every stage reads its inputs from and writes its artifacts into one run
//! directory. A `manifest.json` at the root records, per stage, the seed,
//! the configuration hash and SHA-256 digests of inputs and outputs. No
//! wall-clock data is recorded, so identical configurations produce
//! byte-identical directories.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Baseline, Config};
use crate::disagg::{pso_disaggregate, DisaggConfig};
use crate::error::{Error, Result};
use crate::events::detect_events;
use crate::extraction::extract_profiles;
use crate::forecast::{
    build_dataset, build_features, predict_with_threshold, train, write_training_log, FeatureLayout,
    ForecastModel, StateTimeline, CHECKPOINT_VERSION,
};
use crate::ingest::{derivative, load_series, CsvSchema};
use crate::metrics::{
    daily_metrics, metrics, persistence_15min, persistence_7d, write_report_csv, Metrics, MetricsSummary, Spread,
    HORIZON, SECONDS_PER_DAY,
};
use crate::model::{read_profiles_json, write_profiles_json, DeviceProfile, PowerSeries, StateChangesMatrix, StateKind, Vec6};
use crate::synth::{generate, series_stats, weekday};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    SynthGen,
    Ingest,
    ExtractProfiles,
    Disaggregate,
    TrainForecast,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::SynthGen,
        Stage::Ingest,
        Stage::ExtractProfiles,
        Stage::Disaggregate,
        Stage::TrainForecast,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthGen => "synth-gen",
            Stage::Ingest => "ingest",
            Stage::ExtractProfiles => "extract-profiles",
            Stage::Disaggregate => "disaggregate",
            Stage::TrainForecast => "train-forecast",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Artifact locations relative to the run directory.
pub mod paths {
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.toml";
    pub const SYNTH_SERIES: &str = "synth/series.csv";
    pub const SYNTH_STATES: &str = "synth/truth_states.csv";
    pub const SYNTH_PROFILES: &str = "synth/truth_profiles.json";
    pub const SYNTH_SCENARIO: &str = "synth/scenario.json";
    pub const SYNTH_STATS: &str = "synth/stats.json";
    pub const SERIES: &str = "ingest/series.csv";
    pub const GAPFILL: &str = "ingest/gapfill.json";
    pub const EVENTS: &str = "extract/events.csv";
    pub const PROFILES: &str = "extract/profiles.json";
    pub const CATALOG: &str = "extract/catalog.csv";
    pub const CENTERS: &str = "extract/centers.csv";
    pub const K_CURVE: &str = "extract/k_curve.csv";
    pub const DURATIONS: &str = "extract/durations.csv";
    pub const BIC: &str = "extract/bic.csv";
    pub const EXTRACT_DIAGNOSTICS: &str = "extract/diagnostics.json";
    pub const STATES: &str = "disaggregate/states.csv";
    pub const RECONSTRUCTION: &str = "disaggregate/reconstruction.csv";
    pub const DISAGG_REPORT: &str = "disaggregate/report.json";
    pub const DISAGG_DAILY: &str = "disaggregate/daily_report.csv";
    pub const DISAGG_PLOT: &str = "disaggregate/plot.csv";
    pub const MODEL: &str = "forecast/model.json";
    pub const FEATURES: &str = "forecast/features.json";
    pub const TRAINING_LOG: &str = "forecast/training_log.csv";
    pub const FORECAST: &str = "predict/forecast.csv";
    pub const FORECAST_STATES: &str = "predict/state_changes.csv";
    pub const FORECAST_PLOT: &str = "predict/plot.csv";
    pub const FORECAST_REPORT: &str = "evaluate/forecast_report.csv";
    pub const FORECAST_WINDOWS: &str = "evaluate/forecast_windows.csv";
    pub const DISAGG_EVAL: &str = "evaluate/disaggregation_report.csv";
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Options that only exist on the command line.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Replaces the configured evaluation baselines.
    pub baselines: Option<Vec<Baseline>>,
}

pub struct Run {
    dir: PathBuf,
    config: Config,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: Config) -> Self {
        Self { dir: dir.into(), config }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Opens an upstream artifact, or reports which stage produces it.
    fn require(&self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency {
                artifact: p,
                subcommand: producer.name().to_string(),
            })
        }
    }

    fn load_series(&self) -> Result<PowerSeries> {
        let p = self.require(paths::SERIES, Stage::Ingest)?;
        Ok(load_series(&p, &CsvSchema::default())?.0)
    }

    fn load_profiles(&self) -> Result<Vec<DeviceProfile>> {
        let p = self.require(paths::PROFILES, Stage::ExtractProfiles)?;
        read_profiles_json(BufReader::new(File::open(p)?))
    }

    fn load_states(&self, len: usize, devices: usize) -> Result<StateChangesMatrix> {
        let p = self.require(paths::STATES, Stage::Disaggregate)?;
        StateChangesMatrix::read_csv(BufReader::new(File::open(p)?), len, devices, StateKind::Discrete)
    }

    fn load_model(&self) -> Result<ForecastModel> {
        let p = self.require(paths::MODEL, Stage::TrainForecast)?;
        ForecastModel::read_json(BufReader::new(File::open(p)?))
    }

    fn record(&self, stage: Stage, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let mp = self.path(paths::MANIFEST);
        let mut manifest: Manifest = if mp.is_file() {
            serde_json::from_reader(BufReader::new(File::open(&mp)?))?
        } else {
            Manifest::default()
        };
        manifest.tool = "nilm".into();
        manifest.version = env!("CARGO_PKG_VERSION").into();
        let digest = |rels: &[&str]| -> Result<BTreeMap<String, String>> {
            rels.iter()
                .map(|r| Ok((r.to_string(), sha256_file(&self.path(r))?)))
                .collect()
        };
        let mut inputs = digest(inputs)?;
        if stage == Stage::Ingest {
            if let Some(p) = &self.config.input.path {
                inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                seed: self.config.seed,
                config_hash: self.config.hash(),
                inputs,
                outputs: digest(outputs)?,
            },
        );
        self.write_json(paths::MANIFEST, &manifest)?;
        let mut w = self.create(paths::CONFIG)?;
        w.write_all(self.config.to_toml().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn run(&self, stage: Stage, opts: &StageOptions) -> Result<()> {
        log::info!("running {}", stage.name());
        match stage {
            Stage::SynthGen => self.synth_gen(),
            Stage::Ingest => self.ingest(),
            Stage::ExtractProfiles => self.extract(),
            Stage::Disaggregate => self.disaggregate(),
            Stage::TrainForecast => self.train_forecast(),
            Stage::Predict => self.predict(),
            Stage::Evaluate => self.evaluate(opts),
        }
    }

    /// All stages in order; `synth-gen` is skipped when an input file is
    /// configured.
    pub fn pipeline(&self, opts: &StageOptions) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::SynthGen && self.config.input.path.is_some() {
                continue;
            }
            self.run(stage, opts)?;
        }
        Ok(())
    }

    fn synth_gen(&self) -> Result<()> {
        let scenario = self.config.synth.build(self.config.seed);
        let g = generate(&scenario)?;
        let mut w = self.create(paths::SYNTH_SERIES)?;
        g.series.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::SYNTH_STATES)?;
        g.truth.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::SYNTH_PROFILES)?;
        write_profiles_json(&g.profiles, &mut w)?;
        w.flush()?;
        self.write_json(paths::SYNTH_SCENARIO, &scenario)?;
        self.write_json(paths::SYNTH_STATS, &series_stats(&g.series))?;
        self.record(
            Stage::SynthGen,
            &[],
            &[
                paths::SYNTH_SERIES,
                paths::SYNTH_STATES,
                paths::SYNTH_PROFILES,
                paths::SYNTH_SCENARIO,
                paths::SYNTH_STATS,
            ],
        )
    }

    fn ingest(&self) -> Result<()> {
        let (series, summary) = match &self.config.input.path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::Input(format!("input file {} not found", p.display())));
                }
                load_series(p, &self.config.input.schema)?
            }
            None => {
                let p = self.require(paths::SYNTH_SERIES, Stage::SynthGen)?;
                load_series(&p, &CsvSchema::default())?
            }
        };
        let mut w = self.create(paths::SERIES)?;
        series.write_csv(&mut w)?;
        w.flush()?;
        self.write_json(paths::GAPFILL, &summary)?;
        let inputs: &[&str] = if self.config.input.path.is_some() { &[] } else { &[paths::SYNTH_SERIES] };
        self.record(Stage::Ingest, inputs, &[paths::SERIES, paths::GAPFILL])
    }

    fn extract(&self) -> Result<()> {
        let series = self.load_series()?;
        let ex = extract_profiles(&series, &self.config.extraction, self.config.seed)?;
        let mut w = self.create(paths::EVENTS)?;
        ex.events.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::PROFILES)?;
        write_profiles_json(&ex.profiles, &mut w)?;
        w.flush()?;
        let mut w = self.create(paths::CATALOG)?;
        crate::profiles::write_catalog(&ex.catalog, &mut w)?;
        w.flush()?;
        let mut w = self.create(paths::CENTERS)?;
        ex.clustering.write_centers_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::K_CURVE)?;
        ex.selection.write_curve(&mut w)?;
        w.flush()?;
        let mut w = csv::Writer::from_writer(self.create(paths::DURATIONS)?);
        w.write_record(["cluster", "on_time", "duration"])?;
        for (c, samples) in ex.durations.iter().enumerate() {
            for s in samples {
                w.write_record([c.to_string(), s.on_time.to_string(), s.duration.to_string()])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(self.create(paths::BIC)?);
        w.write_record(["cluster", "m", "bic"])?;
        for (c, curve) in &ex.bic_curves {
            for (m, bic) in curve {
                w.write_record([c.to_string(), m.to_string(), bic.to_string()])?;
            }
        }
        w.flush()?;
        self.write_json(
            paths::EXTRACT_DIAGNOSTICS,
            &serde_json::json!({
                "events": ex.events.len(),
                "k_selected": ex.selection.best_k,
                "k_margin": ex.selection.margin,
                "k_ambiguous": ex.selection.ambiguous,
                "clusters_final": ex.clustering.k(),
                "merges": ex.merges.len(),
                "groups": ex.groups.len(),
                "profiles": ex.profiles.len(),
                "kmeans_monotonicity_violations": ex.selection.monotonicity_violations,
                "em_monotonicity_violations": ex.em_violations,
            }),
        )?;
        if ex.profiles.is_empty() {
            return Err(Error::Extraction(
                "no run-time group reached the minimum size; no profiles written".into(),
            ));
        }
        self.record(
            Stage::ExtractProfiles,
            &[paths::SERIES],
            &[
                paths::EVENTS,
                paths::PROFILES,
                paths::CATALOG,
                paths::CENTERS,
                paths::K_CURVE,
                paths::DURATIONS,
                paths::BIC,
                paths::EXTRACT_DIAGNOSTICS,
            ],
        )
    }

    fn disaggregate(&self) -> Result<()> {
        let series = self.load_series()?;
        let profiles = self.load_profiles()?;
        let events = detect_events(&derivative(&series)?, self.config.extraction.threshold)?;
        let cfg = DisaggConfig {
            seed: self.config.seed,
            ..self.config.disaggregation.clone()
        };
        let d = pso_disaggregate(&series, &profiles, &events, &cfg)?;
        let mut w = self.create(paths::STATES)?;
        d.states.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::RECONSTRUCTION)?;
        d.reconstruction.write_csv(&mut w)?;
        w.flush()?;
        self.write_json(paths::DISAGG_REPORT, &d.report)?;
        let days = daily_metrics(&series, &d.reconstruction, self.config.evaluation.mape_floor)?;
        let mut w = self.create(paths::DISAGG_DAILY)?;
        write_report_csv(&[("pso".to_string(), MetricsSummary::of(&days))], Spread::Sem, &mut w)?;
        w.flush()?;
        write_plot(
            self.create(paths::DISAGG_PLOT)?,
            &series,
            0,
            &d.reconstruction.samples()[..],
            "reconstructed",
        )?;
        self.record(
            Stage::Disaggregate,
            &[paths::SERIES, paths::PROFILES],
            &[
                paths::STATES,
                paths::RECONSTRUCTION,
                paths::DISAGG_REPORT,
                paths::DISAGG_DAILY,
                paths::DISAGG_PLOT,
            ],
        )
    }

    fn layout(&self, devices: usize) -> FeatureLayout {
        let f = &self.config.forecast;
        FeatureLayout {
            devices,
            past_seconds: f.past_seconds,
            past_bins: f.past_bins,
            week_seconds: f.week_seconds,
            week_bins: f.week_bins,
            horizon: HORIZON,
            output_steps: f.output_steps,
        }
    }

    /// First sample of the held-out evaluation period.
    fn test_start(&self, len: usize) -> usize {
        len.saturating_sub(self.config.forecast.test_days * SECONDS_PER_DAY)
    }

    fn train_forecast(&self) -> Result<()> {
        let series = self.load_series()?;
        let profiles = self.load_profiles()?;
        let states = self.load_states(series.len(), profiles.len())?;
        let timeline = StateTimeline::new(&states);
        let layout = self.layout(profiles.len());
        layout.validate()?;
        let f = &self.config.forecast;
        let ds = build_dataset(
            &timeline,
            series.start_timestamp(),
            &layout,
            0,
            self.test_start(series.len()),
            f.stride,
            f.workdays_only,
        )?;
        log::info!("training on {} windows with {} inputs", ds.t0.len(), layout.input_len());
        let out = train(&ds.inputs, &ds.targets, &f.train, self.config.seed)?;
        let model = ForecastModel {
            version: CHECKPOINT_VERSION,
            layout: layout.clone(),
            scale: timeline.scale().to_vec(),
            network: out.model,
        };
        let mut w = self.create(paths::MODEL)?;
        model.write_json(&mut w)?;
        w.flush()?;
        let mut descriptor = layout.descriptor();
        descriptor["parameters"] = model.network.parameter_count().into();
        descriptor["layer_sizes"] = serde_json::to_value(model.network.layer_sizes())?;
        descriptor["training_windows"] = ds.t0.len().into();
        descriptor["best_epoch"] = out.best_epoch.into();
        self.write_json(paths::FEATURES, &descriptor)?;
        let mut w = self.create(paths::TRAINING_LOG)?;
        write_training_log(&out.log, &mut w)?;
        w.flush()?;
        self.record(
            Stage::TrainForecast,
            &[paths::SERIES, paths::PROFILES, paths::STATES],
            &[paths::MODEL, paths::FEATURES, paths::TRAINING_LOG],
        )
    }

    /// Evaluation window starts: every `window_stride` seconds from the test
    /// start, with complete history and horizon.
    fn evaluation_windows(&self, series: &PowerSeries, layout: &FeatureLayout) -> Vec<usize> {
        let start = self.test_start(series.len()).max(layout.min_t0());
        (start..=series.len().saturating_sub(HORIZON))
            .step_by(self.config.evaluation.window_stride)
            .filter(|&t| !self.config.forecast.workdays_only || weekday(series.timestamp(t)) < 5)
            .collect()
    }

    fn forecast_at(
        &self,
        model: &ForecastModel,
        timeline: &StateTimeline,
        series: &PowerSeries,
        profiles: &[DeviceProfile],
        t0: usize,
    ) -> Result<crate::forecast::ForecastResult> {
        let x = build_features(timeline, series.start_timestamp(), t0, &model.layout)?;
        let last: Vec<f64> = (0..model.layout.devices).map(|d| timeline.value(d, t0 - 1)).collect();
        predict_with_threshold(
            model,
            &x,
            profiles,
            &last,
            series.get(t0 - 1),
            series.timestamp(t0),
            self.config.forecast.reconstruction_threshold,
        )
    }

    fn predict(&self) -> Result<()> {
        let model = self.load_model()?;
        let series = self.load_series()?;
        let profiles = self.load_profiles()?;
        let states = self.load_states(series.len(), profiles.len())?;
        let timeline = StateTimeline::new(&states).with_scale(model.scale.clone())?;
        let t0 = match self.config.forecast.predict_at {
            Some(ts) => {
                let offset = ts - series.start_timestamp();
                if offset < 0 || offset as usize > series.len() {
                    return Err(Error::Argument(format!("predict_at {ts} lies outside the series")));
                }
                offset as usize
            }
            None => *self
                .evaluation_windows(&series, &model.layout)
                .first()
                .ok_or_else(|| Error::Argument("no forecast start with a complete history".into()))?,
        };
        let f = self.forecast_at(&model, &timeline, &series, &profiles, t0)?;
        let mut w = self.create(paths::FORECAST)?;
        f.power.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(paths::FORECAST_STATES)?;
        f.block.write_csv(&mut w)?;
        w.flush()?;
        let end = (t0 + HORIZON).min(series.len());
        write_plot(
            self.create(paths::FORECAST_PLOT)?,
            &series,
            t0,
            &f.power.samples()[..end - t0],
            "forecast",
        )?;
        self.record(
            Stage::Predict,
            &[paths::SERIES, paths::PROFILES, paths::STATES, paths::MODEL],
            &[paths::FORECAST, paths::FORECAST_STATES, paths::FORECAST_PLOT],
        )
    }

    fn evaluate(&self, opts: &StageOptions) -> Result<()> {
        let model = self.load_model()?;
        let series = self.load_series()?;
        let profiles = self.load_profiles()?;
        let states = self.load_states(series.len(), profiles.len())?;
        let timeline = StateTimeline::new(&states).with_scale(model.scale.clone())?;
        let baselines = opts
            .baselines
            .clone()
            .unwrap_or_else(|| self.config.evaluation.baselines.clone());
        let floor = self.config.evaluation.mape_floor;
        let windows = self.evaluation_windows(&series, &model.layout);
        if windows.is_empty() {
            return Err(Error::Argument("no evaluation window with a complete history".into()));
        }
        let mut per_method: Vec<(String, Vec<Metrics>)> = vec![("model".into(), Vec::new())];
        per_method.extend(baselines.iter().map(|b| (b.name().to_string(), Vec::new())));
        let mut w = csv::Writer::from_writer(self.create(paths::FORECAST_WINDOWS)?);
        w.write_record(["timestamp", "method", "rmse", "mae", "mape", "energy_error"])?;
        let total = |v: &[Vec6]| v.iter().map(Vec6::total_active).collect::<Vec<f64>>();
        for &t0 in &windows {
            let measured = total(&series.samples()[t0..t0 + HORIZON]);
            let mut preds = vec![total(self.forecast_at(&model, &timeline, &series, &profiles, t0)?.power.samples())];
            for b in &baselines {
                preds.push(total(&match b {
                    Baseline::Persistence15min => persistence_15min(&series, t0)?,
                    Baseline::Persistence7d => persistence_7d(&series, t0, HORIZON)?,
                }));
            }
            for ((name, acc), p) in per_method.iter_mut().zip(&preds) {
                let m = metrics(&measured, p, floor)?;
                w.write_record([
                    series.timestamp(t0).to_string(),
                    name.clone(),
                    m.rmse.to_string(),
                    m.mae.to_string(),
                    m.mape.to_string(),
                    m.energy_error.to_string(),
                ])?;
                acc.push(m);
            }
        }
        w.flush()?;
        let rows: Vec<(String, MetricsSummary)> = per_method
            .iter()
            .map(|(n, ms)| (n.clone(), MetricsSummary::of(ms)))
            .collect();
        let mut w = self.create(paths::FORECAST_REPORT)?;
        write_report_csv(&rows, Spread::Std, &mut w)?;
        w.flush()?;
        let mut inputs = vec![paths::SERIES, paths::PROFILES, paths::STATES, paths::MODEL];
        let mut outputs = vec![paths::FORECAST_WINDOWS, paths::FORECAST_REPORT];
        if self.path(paths::RECONSTRUCTION).is_file() {
            let recon = load_series(&self.path(paths::RECONSTRUCTION), &CsvSchema::default())?.0;
            let days = daily_metrics(&series, &recon, floor)?;
            let mut w = self.create(paths::DISAGG_EVAL)?;
            write_report_csv(&[("pso".to_string(), MetricsSummary::of(&days))], Spread::Sem, &mut w)?;
            w.flush()?;
            inputs.push(paths::RECONSTRUCTION);
            outputs.push(paths::DISAGG_EVAL);
        }
        self.record(Stage::Evaluate, &inputs, &outputs)
    }
}

/// Plot data: timestamp, measured total active power and a second series
/// starting at sample `start`.
fn write_plot<W: Write>(writer: W, measured: &PowerSeries, start: usize, other: &[Vec6], name: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "measured", name])?;
    for (k, v) in other.iter().enumerate() {
        let t = start + k;
        let m = if t < measured.len() {
            measured.get(t).total_active().to_string()
        } else {
            String::new()
        };
        w.write_record([measured.timestamp(t).to_string(), m, v.total_active().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
