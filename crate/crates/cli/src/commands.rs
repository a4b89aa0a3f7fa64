use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Result;
use serde_json::json;
use vragent_core::dataset::{read_dataset, write_dataset, SamplerKind};
use vragent_core::horizon::{ControllerConfig, Signal};
use vragent_core::injection::{self, BenchConfig, BenchReport, StageStats};
use vragent_core::policy::blob::{self, ModelKind};
use vragent_core::sim::ablation::{mean_accuracy_by_label, write_mode_table, write_signal_table};
use vragent_core::sim::map::{read_map, write_map, Profile};
use vragent_core::sim::rollout::{cell_seed, write_trace, POLICY_RATE_HZ};
use vragent_core::sim::{
    generate_map, preset_maps, record_episode, run_ablation, run_closed_loop, run_repeated, AblationSpec, Agent,
    AveragedReport, IdentityAgent, MapSpec, Mode, ModelAgent, NoisyOracleAgent, NoteMap, OracleAgent, RunConfig,
    DEFAULT_FEATURE_DIM,
};
use vragent_core::training::{checkpoint_policy_blob, TrainConfig, TrainLog, Trainer};
use vragent_core::{ActPolicy, BaselinePolicy, ChunkModel, Dataset, PolicyConfig};

use crate::args::*;
use crate::failure::Failure;
use crate::manifest::Recorder;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VRCK";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::usage(msg).into()
}

fn load_map(rec: &mut Recorder, path: &Path) -> Result<NoteMap> {
    let bytes = rec.read_input(path)?;
    read_map(&bytes[..]).map_err(|e| Failure::data(format!("{}: {e}", path.display())).into())
}

fn load_maps(rec: &mut Recorder, list: &str) -> Result<Vec<NoteMap>> {
    let paths = split_list(list);
    if paths.is_empty() {
        return Err(usage("no map files given"));
    }
    paths.into_iter().map(|p| load_map(rec, Path::new(p))).collect()
}

fn scene_map(rec: &mut Recorder, scene: &SceneArgs) -> Result<NoteMap> {
    match &scene.map {
        Some(p) => load_map(rec, p),
        None => Ok(generate_map(&MapSpec::new(
            format!("map-{:.2}-s{}", scene.density, scene.map_seed),
            scene.density,
            scene.duration,
            scene.map_seed,
        ))?),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

enum Model {
    Chunked(ActPolicy<f32>),
    Baseline(BaselinePolicy<f32>),
}

/// Everything needed to build fresh agents, possibly from several threads.
struct AgentSource {
    model: Option<Model>,
    kind: String,
    noise: f64,
    rate_sigma: f64,
    jitter: f64,
    horizon: usize,
    buttons: usize,
}

impl AgentSource {
    fn load(rec: &mut Recorder, args: &AgentArgs, seed: Option<u64>) -> Result<Self> {
        let mut kind = args.agent.clone();
        let model = match &args.policy {
            Some(path) => {
                let bytes = rec.read_input(path)?;
                kind = "policy".into();
                Some(load_model(&bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?)
            }
            None if kind == "toy" => {
                let seed = seed.ok_or_else(|| usage("--seed is required for the toy agent"))?;
                let cfg = PolicyConfig {
                    horizon: args.horizon,
                    num_buttons: args.buttons,
                    seed,
                    ..PolicyConfig::default()
                };
                Some(Model::Chunked(ActPolicy::new(cfg)?))
            }
            None => None,
        };
        if let Some(m) = &model {
            let cfg = match m {
                Model::Chunked(p) => p.config(),
                Model::Baseline(p) => p.config(),
            };
            if cfg.obs_dim != DEFAULT_FEATURE_DIM {
                return Err(Failure::data(format!(
                    "policy expects {} observation features, the simulator provides {DEFAULT_FEATURE_DIM}",
                    cfg.obs_dim
                ))
                .into());
            }
        }
        if args.horizon == 0 {
            return Err(usage("--horizon must be positive"));
        }
        Ok(Self {
            model,
            kind,
            noise: args.noise,
            rate_sigma: args.rate_sigma,
            jitter: args.jitter,
            horizon: args.horizon,
            buttons: args.buttons,
        })
    }

    fn stochastic(&self) -> bool {
        match self.kind.as_str() {
            "noisy" => true,
            "oracle" => self.noise > 0.0,
            _ => false,
        }
    }

    fn make(&self) -> Box<dyn Agent + Send + '_> {
        match (&self.model, self.kind.as_str()) {
            (Some(Model::Chunked(p)), k) => Box::new(ModelAgent::new(p, if k == "toy" { "toy" } else { "chunked" })),
            (Some(Model::Baseline(p)), _) => Box::new(ModelAgent::new(p, "single-step")),
            (None, "oracle") => Box::new(OracleAgent::new(self.noise, self.horizon, self.buttons)),
            (None, "identity") => Box::new(IdentityAgent::new(self.horizon, self.buttons)),
            (None, _) => Box::new(NoisyOracleAgent::new(
                self.rate_sigma,
                self.jitter,
                self.horizon,
                self.buttons,
            )),
        }
    }
}

fn load_model(bytes: &[u8]) -> Result<Model> {
    let blob_bytes = if bytes.starts_with(CHECKPOINT_MAGIC) {
        checkpoint_policy_blob(bytes)?
    } else {
        bytes
    };
    let decoded = blob::decode(blob_bytes)?;
    Ok(match decoded.kind {
        ModelKind::Chunked => Model::Chunked(ActPolicy::from_blob(blob_bytes)?),
        ModelKind::Baseline => Model::Baseline(BaselinePolicy::from_blob(blob_bytes)?),
    })
}

fn parse_signal(s: &str) -> Result<Signal> {
    s.parse::<Signal>().map_err(usage)
}

fn build_mode(name: &str, signal: &str, window: usize, decay: f64, horizon: usize) -> Result<Mode> {
    Ok(match name {
        "nosw" => Mode::NoSw,
        "fixed" => Mode::FixedSw { window, decay },
        "sw" => Mode::Adaptive(ControllerConfig::new(parse_signal(signal)?, horizon)),
        other => return Err(usage(format!("unknown mode '{other}'"))),
    })
}

fn mode_label(name: &str) -> String {
    match name {
        "sw" => "SW".into(),
        "nosw" => "No SW".into(),
        other => other.to_string(),
    }
}

fn run_config(physics_hz: f64, repeats: usize, seed: u64) -> RunConfig {
    RunConfig {
        physics_hz,
        repeats,
        seed,
        ..RunConfig::default()
    }
}

pub fn gen_map(a: &GenMapArgs, rec: &mut Recorder) -> Result<()> {
    let id =
        a.id.clone()
            .unwrap_or_else(|| format!("map-{:.2}-s{}", a.density, a.seed));
    if id.is_empty() || id.contains(['/', '\\']) {
        return Err(usage(format!("map id '{id}' cannot name a file")));
    }
    let spec = MapSpec {
        profile: a.profile.parse::<Profile>().map_err(usage)?,
        alternation: a.alternation,
        ..MapSpec::new(id.clone(), a.density, a.duration, a.seed)
    };
    rec.seeds = json!({ "map": a.seed });
    let map = generate_map(&spec)?;
    let bytes = csv_bytes(|b| Ok(write_map(&map, b)?))?;
    let path = rec.write_output(&format!("{id}.map"), &bytes, true)?;
    println!(
        "map {id}: {} notes over {} s ({:.2} notes/s) -> {}",
        map.notes.len(),
        a.duration,
        map.realized_density(),
        path.display()
    );
    Ok(())
}

pub fn record(a: &RecordArgs, rec: &mut Recorder) -> Result<()> {
    let maps = load_maps(rec, &a.map)?;
    let run = run_config(a.physics_hz, 1, a.seed);
    let target = a.hours * 3600.0;
    let mut episodes = Vec::new();
    let mut seeds = Vec::new();
    let mut seconds = 0.0;
    while seconds < target {
        let i = episodes.len() as u64;
        let map = &maps[i as usize % maps.len()];
        let seed = cell_seed(a.seed, i);
        let ep = record_episode(map, i, a.noise, a.buttons, seed, &run)?;
        if ep.is_empty() {
            return Err(usage(format!("map '{}' yields empty episodes", map.spec.id)));
        }
        seconds += ep.len() as f64 / POLICY_RATE_HZ;
        seeds.push(seed);
        episodes.push(ep);
    }
    rec.seeds = json!({ "base": a.seed, "episodes": seeds });
    let ds = Dataset::new(episodes, a.buttons);
    let bytes = csv_bytes(|b| Ok(write_dataset(&ds, b)?))?;
    let path = rec.write_output("dataset.bin", &bytes, true)?;
    println!(
        "recorded {} episodes, {} frames ({:.1} s) at noise {} -> {}",
        ds.episodes.len(),
        ds.total_frames(),
        seconds,
        a.noise,
        path.display()
    );
    Ok(())
}

fn train_loop<M: ChunkModel<f32>>(
    model: M,
    resume: Option<&[u8]>,
    cfg: TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<(Trainer<f32, M>, TrainLog)> {
    let mut trainer = match resume {
        Some(bytes) => Trainer::resume(model, cfg.clone(), bytes)?,
        None => Trainer::new(model, cfg.clone())?,
    };
    let mut log = TrainLog::default();
    trainer.run(train, val, cfg.iterations, &mut log)?;
    Ok((trainer, log))
}

fn finish_training<M: ChunkModel<f32>>(rec: &mut Recorder, trainer: &Trainer<f32, M>, log: &TrainLog) -> Result<()> {
    let ckpt = rec.write_output("checkpoint.bin", &trainer.checkpoint(), true)?;
    let policy = rec.write_output("policy.bin", &trainer.model.to_blob(), true)?;
    let curve = csv_bytes(|b| Ok(log.write_csv(b)?))?;
    let curve_path = rec.write_output("curve.csv", &curve, true)?;
    let smooth = |it| log.smoothed_l1(it, 50);
    match (log.curve.first(), log.curve.last()) {
        (Some(first), Some(last)) => println!(
            "trained to iteration {}: smoothed l1 {:.4} -> {:.4}{}",
            trainer.iteration,
            smooth(first.iteration).unwrap_or(f64::NAN),
            smooth(last.iteration).unwrap_or(f64::NAN),
            log.last_val_total()
                .map(|v| format!(", validation total {v:.4}"))
                .unwrap_or_default()
        ),
        _ => println!("already at iteration {}; nothing to do", trainer.iteration),
    }
    if !log.skipped_steps.is_empty() {
        println!("{} steps skipped for non-finite gradients", log.skipped_steps.len());
    }
    println!(
        "checkpoint {} | policy {} | curve {}",
        ckpt.display(),
        policy.display(),
        curve_path.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs, rec: &mut Recorder) -> Result<()> {
    let bytes = rec.read_input(&a.dataset)?;
    let ds = read_dataset(&bytes[..]).map_err(|e| Failure::data(format!("{}: {e}", a.dataset.display())))?;
    let obs_dim = ds
        .episodes
        .iter()
        .find_map(|e| e.frames.first())
        .map(|f| f.observation.feature.len())
        .ok_or_else(|| Failure::data(format!("{}: dataset has no frames", a.dataset.display())))?;
    if !(a.split > 0.0 && a.split <= 1.0) {
        return Err(usage(format!("--split must be in (0, 1], got {}", a.split)));
    }
    let (train_set, val_set) = if a.split < 1.0 {
        let (t, v) = ds.split(a.split, a.seed)?;
        (t, Some(v))
    } else {
        (ds, None)
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        iterations: a.iterations,
        lambda_kl: a.lambda_kl,
        sampler: a.sampler.parse::<SamplerKind>().map_err(usage)?,
        seed: a.seed,
        val_every: a.val_every,
        prefetch: a.prefetch,
    };
    rec.seeds = json!({ "training": a.seed, "init": a.seed, "split": a.seed });
    let resume = match &a.resume {
        Some(p) => Some(rec.read_input(p)?),
        None => None,
    };
    let (kind, pcfg) = match &resume {
        Some(bytes) => {
            let b = checkpoint_policy_blob(bytes)?;
            let d = blob::decode(b)?;
            (d.kind, d.config)
        }
        None => (
            if a.model == "baseline" {
                ModelKind::Baseline
            } else {
                ModelKind::Chunked
            },
            PolicyConfig {
                obs_dim,
                width: a.width,
                enc_layers: a.enc_layers,
                dec_layers: a.dec_layers,
                heads: a.heads,
                horizon: a.horizon,
                latent_dim: a.latent,
                num_buttons: train_set.num_buttons,
                ffn_hidden: a.ffn,
                history: a.history,
                seed: a.seed,
                ..PolicyConfig::default()
            },
        ),
    };
    if pcfg.obs_dim != obs_dim || pcfg.num_buttons != train_set.num_buttons {
        return Err(Failure::data(format!(
            "checkpoint expects {} features and {} buttons, dataset has {obs_dim} and {}",
            pcfg.obs_dim, pcfg.num_buttons, train_set.num_buttons
        ))
        .into());
    }
    let resume = resume.as_deref();
    match kind {
        ModelKind::Chunked => {
            let (t, log) = train_loop(ActPolicy::<f32>::new(pcfg)?, resume, cfg, &train_set, val_set.as_ref())?;
            finish_training(rec, &t, &log)
        }
        ModelKind::Baseline => {
            let (t, log) = train_loop(
                BaselinePolicy::<f32>::new(pcfg)?,
                resume,
                cfg,
                &train_set,
                val_set.as_ref(),
            )?;
            finish_training(rec, &t, &log)
        }
    }
}

fn results_table(rows: &[(String, f64, String, AveragedReport)]) -> String {
    let mut s = String::from("Map,Notes/sec,Mode,Max Combo,Accuracy (% Good),Rank\n");
    for (map, nps, mode, r) in rows {
        let _ = writeln!(
            s,
            "{map},{nps:.2},{mode},{:.2},{:.2},{}",
            r.max_combo,
            r.accuracy,
            r.rank()
        );
    }
    s
}

pub fn eval(a: &EvalArgs, rec: &mut Recorder) -> Result<()> {
    let maps = load_maps(rec, &a.map)?;
    let source = AgentSource::load(rec, &a.agent, Some(a.seed))?;
    let mut agent = source.make();
    let mode = build_mode(
        &a.mode.mode,
        &a.mode.signal,
        a.mode.window,
        a.mode.decay,
        agent.horizon(),
    )?;
    let run = run_config(a.physics_hz, a.repeats, a.seed);
    rec.seeds = json!({ "runs": (0..a.repeats.max(1) as u64).map(|r| a.seed.wrapping_add(r)).collect::<Vec<_>>() });
    let mut rows = Vec::new();
    for map in &maps {
        let report = run_repeated(agent.as_mut(), map, &mode, &run)?;
        if a.trace {
            let result = run_closed_loop(agent.as_mut(), map, &mode, &run, a.seed)?;
            let bytes = csv_bytes(|b| Ok(write_trace(&result.trace, b)?))?;
            rec.write_output(&format!("trace-{}.csv", map.spec.id), &bytes, true)?;
        }
        rows.push((map.spec.id.clone(), map.spec.density, mode_label(&a.mode.mode), report));
    }
    let table = results_table(&rows);
    rec.write_output("eval.csv", table.as_bytes(), true)?;
    print!("{table}");
    println!(
        "agent {} | mode {mode} | mean of {} runs",
        agent.name(),
        a.repeats.max(1)
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs, rec: &mut Recorder) -> Result<()> {
    let maps = match &a.map {
        Some(list) => load_maps(rec, list)?,
        None => preset_maps(a.duration, a.map_seed)
            .iter()
            .map(generate_map)
            .collect::<Result<_, _>>()?,
    };
    if a.jobs == 0 {
        return Err(usage("--jobs must be positive"));
    }
    let source = AgentSource::load(rec, &a.agent, Some(a.seed))?;
    let horizon = source.make().horizon();
    let mut modes = Vec::new();
    for name in split_list(&a.modes) {
        modes.push((
            mode_label(name),
            build_mode(name, &a.signal, a.window, a.decay, horizon)?,
        ));
    }
    let signals = split_list(&a.signals)
        .into_iter()
        .map(parse_signal)
        .collect::<Result<Vec<_>>>()?;
    let spec = AblationSpec {
        maps,
        modes,
        signals,
        controller: ControllerConfig::new(parse_signal(&a.signal)?, horizon),
        run: run_config(a.physics_hz, a.repeats, a.seed),
        jobs: a.jobs,
    };
    rec.seeds = json!({ "runs": (0..a.repeats.max(1) as u64).map(|r| a.seed.wrapping_add(r)).collect::<Vec<_>>(), "maps": a.map_seed });
    let factory = || source.make();
    let tables = run_ablation(&factory, &spec)?;
    let modes_csv = csv_bytes(|b| Ok(write_mode_table(&tables.modes, b)?))?;
    rec.write_output("table_modes.csv", &modes_csv, true)?;
    print!("{}", String::from_utf8_lossy(&modes_csv));
    if !tables.signals.is_empty() {
        let signals_csv = csv_bytes(|b| Ok(write_signal_table(&tables.signals, b)?))?;
        rec.write_output("table_signals.csv", &signals_csv, true)?;
        println!();
        print!("{}", String::from_utf8_lossy(&signals_csv));
    }
    println!();
    for rows in [&tables.modes, &tables.signals] {
        for (label, acc) in mean_accuracy_by_label(rows) {
            println!("mean accuracy {label}: {acc:.2}%");
        }
    }
    Ok(())
}

fn stage_rows(r: &BenchReport) -> String {
    let mut s = String::from("stage,p50_ms,p99_ms,mean_ms\n");
    let stages: [(&str, &StageStats); 5] = [
        ("controller", &r.controller),
        ("inference", &r.inference),
        ("aggregation", &r.aggregation),
        ("encode", &r.encode),
        ("step", &r.step),
    ];
    for (name, st) in stages {
        let _ = writeln!(s, "{name},{:.6},{:.6},{:.6}", st.p50_ms, st.p99_ms, st.mean_ms);
    }
    s
}

pub fn bench(a: &BenchArgs, rec: &mut Recorder) -> Result<()> {
    let map = scene_map(rec, &a.scene)?;
    let source = AgentSource::load(rec, &a.agent, a.seed)?;
    let mut agent = source.make();
    if a.frames == 0 {
        return Err(usage("--frames must be positive"));
    }
    let cfg = BenchConfig {
        budget: Duration::from_secs_f64(a.budget_ms / 1e3),
        fallback: !a.no_fallback,
        ..BenchConfig::new(parse_signal(&a.signal)?, agent.horizon(), a.frames)
    };
    rec.seeds = json!({ "init": a.seed });
    let r = injection::bench(agent.as_mut(), &map, &cfg)?;
    let table = stage_rows(&r);
    rec.write_output("bench.csv", table.as_bytes(), false)?;
    print!("{table}");
    println!(
        "{}: {} steps, {:.1} steps/s, {} model calls, {} over the {:.2} ms budget, {} fallback steps, window mean {:.2} min {}",
        r.agent,
        r.steps,
        r.steps_per_sec,
        r.model_calls,
        r.over_budget,
        a.budget_ms,
        r.fallback_events,
        r.mean_window,
        r.min_window
    );
    Ok(())
}

pub fn stream(a: &StreamArgs, rec: &mut Recorder) -> Result<()> {
    let map = scene_map(rec, &a.scene)?;
    let source = AgentSource::load(rec, &a.agent, a.seed)?;
    if source.stochastic() && a.seed.is_none() {
        return Err(usage(format!("--seed is required for the {} agent", source.kind)));
    }
    if a.frames == 0 {
        return Err(usage("--frames must be positive"));
    }
    let seed = a.seed.unwrap_or(0);
    let mut agent = source.make();
    let mode = build_mode(
        &a.mode.mode,
        &a.mode.signal,
        a.mode.window,
        a.mode.decay,
        agent.horizon(),
    )?;
    let run = run_config(a.physics_hz, 1, seed);
    let mut frames = Vec::with_capacity(a.frames);
    let mut r = 0u64;
    while frames.len() < a.frames {
        let result = run_closed_loop(agent.as_mut(), &map, &mode, &run, seed.wrapping_add(r))?;
        if result.actions.is_empty() {
            return Err(usage("map produces no frames"));
        }
        frames.extend(result.actions);
        r += 1;
    }
    frames.truncate(a.frames);
    rec.seeds = json!({ "runs": (0..r).map(|i| seed.wrapping_add(i)).collect::<Vec<_>>() });

    let mut lines: Vec<(String, String)> = Vec::new();
    let stats = match a.transport.as_str() {
        "memory" => {
            let (mut sink, src) = injection::frame_queue(injection::QUEUE_CAPACITY);
            let validator = std::thread::spawn(move || injection::validate_stream(src));
            let stats = injection::stream(frames, a.rate, &mut sink);
            let dropped = sink.dropped();
            drop(sink);
            let report = validator
                .join()
                .map_err(|_| Failure::internal("validator thread panicked"))?;
            let stats = stats?;
            lines.push(("validated_frames".into(), report.frames.to_string()));
            lines.push(("violations".into(), report.violations().to_string()));
            lines.push(("dropped".into(), dropped.to_string()));
            if !report.is_clean() || report.frames != a.frames as u64 {
                return Err(Failure::internal(format!(
                    "validator saw {} of {} frames with {} violations ({report:?})",
                    report.frames,
                    a.frames,
                    report.violations()
                ))
                .into());
            }
            stats
        }
        "tcp" => {
            let mut conn = std::net::TcpStream::connect(&a.addr)
                .map_err(|e| Failure::data(format!("cannot connect to {}: {e}", a.addr)))?;
            conn.set_nodelay(true)?;
            injection::stream(frames, a.rate, &mut conn)?
        }
        _ => {
            let mut out = std::io::stdout().lock();
            let stats = injection::stream(frames, a.rate, &mut out)?;
            out.flush()?;
            stats
        }
    };
    let mut table = String::from("metric,value\n");
    let base = [
        ("frames", stats.frames.to_string()),
        ("duration_s", format!("{:.6}", stats.duration.as_secs_f64())),
        ("achieved_hz", format!("{:.4}", stats.achieved_hz)),
        ("p50_period_error_ms", format!("{:.4}", stats.p50_error * 1e3)),
        ("p99_period_error_ms", format!("{:.4}", stats.p99_error * 1e3)),
        ("deadline_misses", stats.deadline_misses.to_string()),
        ("max_lateness_ms", format!("{:.4}", stats.max_lateness * 1e3)),
    ];
    for (k, v) in base.iter().map(|(k, v)| (k.to_string(), v.clone())).chain(lines) {
        let _ = writeln!(table, "{k},{v}");
    }
    rec.write_output("stream.csv", table.as_bytes(), false)?;
    let summary = format!(
        "streamed {} frames over {} in {:.3} s ({:.2} Hz, p99 period error {:.3} ms, {} deadline misses)",
        stats.frames,
        a.transport,
        stats.duration.as_secs_f64(),
        stats.achieved_hz,
        stats.p99_error * 1e3,
        stats.deadline_misses
    );
    if a.transport == "stdout" {
        eprintln!("{summary}");
    } else {
        println!("{summary}");
    }
    Ok(())
}

/// File name of each deterministic output of a manifest, with its hash.
pub fn expected_outputs(m: &crate::manifest::RunManifest) -> Vec<(PathBuf, String)> {
    m.outputs
        .iter()
        .filter(|o| o.deterministic)
        .filter_map(|o| o.path.file_name().map(|n| (PathBuf::from(n), o.sha256.clone())))
        .collect()
}
