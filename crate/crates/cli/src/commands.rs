//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use splitcomp_core::bottleneck::{inject as inject_bottleneck, BottleneckedModel, SplitPoint};
use splitcomp_core::codec::Codec;
use splitcomp_core::distill::{
    evaluate_accuracy, train_teacher, train_with_recipe, write_log_csv, Dataset, RecipeName,
};
use splitcomp_core::model::checkpoint::{load_teacher as read_teacher, manifest_path, read_manifest, save_teacher, CheckpointKind};
use splitcomp_core::model::{build_teacher_with_width, ModelGraph};
use splitcomp_core::report::{accuracy_table, AccuracyEntry};
use splitcomp_core::runtime::{infer_local_split, serve as serve_tail, Client, ServerOptions, DEFAULT_TIMEOUT};
use splitcomp_core::sim::{choose_strategy, simulated_crossover, split_edge_crossover, sweep, Strategy, SweepModel, SweepOptions, SweepRow};

use crate::artifacts::{
    missing_run_files, read_json, write_json, CodecResult, EvalSummary, RunSummary, EVAL_FILE, LOG_FILE, SUMMARY_FILE,
};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::plot;

pub const TEACHER_RECIPE: &str = "pretrain_teacher";
pub const TEACHER_SUMMARY_FILE: &str = "teacher.json";

/// Resolved configuration shared by every subcommand.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        let seed = seed.or(cfg.seed).unwrap_or(0);
        let out = out.or_else(|| cfg.out.clone());
        Self { cfg, seed, out }
    }

    /// Output directory, created on first use.
    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn codec(&self, flag: Option<&str>) -> CliResult<Option<Codec>> {
        flag.or(self.cfg.codec.as_deref()).map(|c| c.parse().map_err(CliError::from)).transpose()
    }

    fn checkpoint(&self, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        flag.or_else(|| self.cfg.runtime.checkpoint.clone())
            .or_else(|| self.out.clone())
            .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint or runtime.checkpoint)".into()))
    }

    fn teacher(&self, flag: Option<PathBuf>) -> CliResult<ModelGraph<f32>> {
        let path = flag
            .or_else(|| self.cfg.teacher.checkpoint.clone())
            .ok_or_else(|| CliError::Config("no teacher checkpoint given (--teacher or teacher.checkpoint)".into()))?;
        if !manifest_path(&path).exists() {
            return Err(CliError::Config(format!("teacher checkpoint {} not found", path.display())));
        }
        Ok(read_teacher(&path)?)
    }
}

fn load_student(dir: &Path) -> CliResult<BottleneckedModel<f32>> {
    if !manifest_path(dir).exists() {
        return Err(CliError::Missing(vec![manifest_path(dir)]));
    }
    Ok(BottleneckedModel::load(dir)?)
}

fn check_input(teacher: &ModelGraph<f32>, data: &Dataset) -> CliResult<()> {
    if teacher.input_shape() != data.image_shape() || teacher.num_classes != data.num_classes {
        return Err(CliError::Config(format!(
            "dataset images {:?} with {} classes do not fit a teacher taking {:?} with {} classes",
            data.image_shape(),
            data.num_classes,
            teacher.input_shape(),
            teacher.num_classes
        )));
    }
    Ok(())
}

pub struct SplitOverrides {
    pub split_point: Option<SplitPoint>,
    pub channels: Option<usize>,
}

impl Context {
    fn split_config(&self, o: &SplitOverrides) -> splitcomp_core::bottleneck::SplitConfig {
        let mut section = self.cfg.split.clone();
        if let Some(p) = o.split_point {
            if p != section.split_point {
                section = crate::config::SplitSection { split_point: p, ..Default::default() };
            }
        }
        if let Some(c) = o.channels {
            section.bottleneck_channels = c;
        }
        section.resolve()
    }
}

pub fn inject(ctx: &Context, teacher: Option<PathBuf>, overrides: SplitOverrides) -> CliResult<()> {
    let teacher = ctx.teacher(teacher)?;
    let config = ctx.split_config(&overrides);
    let model = inject_bottleneck(&teacher, &config, ctx.seed)?;
    let out = ctx.out_dir()?;
    let manifest = model.save(&out)?;
    println!(
        "injected {} at {} with {} channels: bottleneck {:?}, {} parameters, digest {}",
        model.name,
        config.split_point,
        config.bottleneck_channels,
        model.bottleneck_shape()?,
        model.num_params(),
        manifest.param_digest
    );
    Ok(())
}

#[derive(Serialize)]
struct TeacherSummary {
    name: String,
    arch: String,
    seed: u64,
    top1: f64,
    param_digest: String,
}

pub fn train(ctx: &Context, recipe: Option<String>, teacher: Option<PathBuf>, epochs: Option<usize>, overrides: SplitOverrides) -> CliResult<()> {
    let recipe = recipe
        .or_else(|| ctx.cfg.recipe.clone())
        .ok_or_else(|| CliError::Config("no recipe given (--recipe or recipe)".into()))?;
    if recipe == TEACHER_RECIPE {
        return pretrain_teacher(ctx, epochs);
    }
    let name: RecipeName = recipe.parse()?;
    let teacher = ctx.teacher(teacher)?;
    let (train, val) = ctx.cfg.data.load()?;
    check_input(&teacher, &train)?;
    let config = ctx.split_config(&overrides);
    let mut schedule = ctx.cfg.schedule.clone();
    if let Some(e) = epochs {
        schedule.stage_epochs = e;
    }
    eprintln!("training {recipe} (seed {}) on {} samples", ctx.seed, train.len());
    let (model, log) = train_with_recipe(name, &teacher, &config, &train, Some(&val), &schedule, ctx.seed)?;
    let top1 = evaluate_accuracy(&model, &val)?;
    let teacher_top1 = evaluate_accuracy(&teacher, &val)?;
    let out = ctx.out_dir()?;
    let manifest = model.save(&out)?;
    write_log_csv(&out.join(LOG_FILE), &log)?;
    let summary = RunSummary {
        name: model.name.clone(),
        recipe: name.as_str().to_string(),
        seed: ctx.seed,
        arch: model.arch.clone(),
        split_point: config.split_point.to_string(),
        channels: config.bottleneck_channels,
        input_shape: model.input_shape(),
        bottleneck_shape: model.bottleneck_shape()?,
        top1,
        teacher_top1,
        param_digest: manifest.param_digest,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!("{recipe}: top-1 {:.2}% (teacher {:.2}%), {} epochs logged", 100.0 * top1, 100.0 * teacher_top1, log.len());
    Ok(())
}

fn pretrain_teacher(ctx: &Context, epochs: Option<usize>) -> CliResult<()> {
    let (train, val) = ctx.cfg.data.load()?;
    let arch = ctx.cfg.teacher.arch;
    let width = ctx.cfg.teacher.width.unwrap_or(arch.default_width());
    let mut teacher = build_teacher_with_width::<f32>(arch, train.image_shape(), train.num_classes, width, ctx.seed)
        .map_err(|e| CliError::Config(format!("cannot build a teacher for this dataset: {e}")))?;
    let mut stage = ctx.cfg.teacher_training.stage();
    if let Some(e) = epochs {
        stage.epochs = e;
    }
    eprintln!("training teacher {} for {} epochs on {} samples", teacher.name, stage.epochs, train.len());
    let log = train_teacher(&mut teacher, &train, Some(&val), &stage, ctx.seed)?;
    let top1 = evaluate_accuracy(&teacher, &val)?;
    let out = ctx.out_dir()?;
    let manifest = save_teacher(&out, &teacher)?;
    write_log_csv(&out.join(LOG_FILE), &log)?;
    let summary = TeacherSummary {
        name: teacher.name.clone(),
        arch: teacher.arch.clone(),
        seed: ctx.seed,
        top1,
        param_digest: manifest.param_digest,
    };
    write_json(&out.join(TEACHER_SUMMARY_FILE), &summary)?;
    println!("teacher: top-1 {:.2}%", 100.0 * top1);
    Ok(())
}

pub fn eval(ctx: &Context, checkpoint: Option<PathBuf>, codec: Option<String>, teacher: Option<PathBuf>) -> CliResult<()> {
    let dir = ctx.checkpoint(checkpoint)?;
    if !manifest_path(&dir).exists() {
        return Err(CliError::Missing(vec![manifest_path(&dir)]));
    }
    let val = ctx.cfg.data.load_val()?;
    let out = match &ctx.out {
        Some(_) => ctx.out_dir()?,
        None => dir.clone(),
    };
    let summary = if read_manifest(&dir)?.kind == CheckpointKind::Teacher {
        let t = read_teacher(&dir)?;
        check_input(&t, &val)?;
        let top1 = evaluate_accuracy(&t, &val)?;
        println!("{}: top-1 {:.2}%", t.name, 100.0 * top1);
        EvalSummary { name: t.name, samples: val.len(), float_top1: top1, codecs: BTreeMap::new(), teacher_top1: None }
    } else {
        let model = load_student(&dir)?;
        let pair = model.split()?;
        let float_top1 = evaluate_accuracy(&model, &val)?;
        let codecs = match ctx.codec(codec.as_deref())? {
            Some(c) => vec![c],
            None => Codec::ALL.to_vec(),
        };
        let shape = model.bottleneck_shape()?;
        let mut results = BTreeMap::new();
        for c in codecs {
            let mut correct = 0;
            for i in 0..val.len() {
                let label = infer_local_split(&pair.head, &pair.tail, &val.images.select(&[i]), c)?.label;
                correct += (label == val.labels[i]) as usize;
            }
            let top1 = correct as f64 / val.len() as f64;
            let payload_bytes = c.payload_len(&shape) as u64;
            println!("{} via {c}: top-1 {:.2}%, {payload_bytes} bytes per image", model.name, 100.0 * top1);
            results.insert(c.to_string(), CodecResult { top1, payload_bytes });
        }
        let teacher_top1 = match teacher.or_else(|| ctx.cfg.teacher.checkpoint.clone()) {
            Some(p) => Some(evaluate_accuracy(&ctx.teacher(Some(p))?, &val)?),
            None => None,
        };
        println!("{} unquantized: top-1 {:.2}%", model.name, 100.0 * float_top1);
        EvalSummary { name: model.name.clone(), samples: val.len(), float_top1, codecs: results, teacher_top1 }
    };
    write_json(&out.join(EVAL_FILE), &summary)
}

pub fn serve(ctx: &Context, checkpoint: Option<PathBuf>, host: Option<String>, port: Option<u16>, codec: Option<String>) -> CliResult<()> {
    let model = load_student(&ctx.checkpoint(checkpoint)?)?;
    let options = match ctx.codec(codec.as_deref())? {
        Some(c) => ServerOptions::only(c),
        None => ServerOptions::default(),
    };
    let host = host.or_else(|| ctx.cfg.runtime.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let port = port.or(ctx.cfg.runtime.port).unwrap_or(5000);
    let handle = serve_tail(model.split()?.tail, (host.as_str(), port), options)?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

#[derive(Serialize)]
struct ClientRow {
    index: usize,
    true_label: usize,
    label: usize,
    payload_bytes: usize,
    head_s: f64,
    serialize_s: f64,
    network_s: f64,
    tail_s: f64,
    total_s: f64,
}

pub struct ClientArgs {
    pub checkpoint: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub images: Option<usize>,
    pub codec: Option<String>,
    pub report: Option<PathBuf>,
    pub timeout_s: Option<f64>,
}

pub fn client(ctx: &Context, args: ClientArgs) -> CliResult<()> {
    let rt = &ctx.cfg.runtime;
    let model = load_student(&ctx.checkpoint(args.checkpoint)?)?;
    let endpoint = args
        .endpoint
        .or_else(|| rt.endpoint.clone())
        .ok_or_else(|| CliError::Config("no endpoint given (--endpoint or runtime.endpoint)".into()))?;
    let codec = ctx.codec(args.codec.as_deref())?.unwrap_or(Codec::Bq8);
    let timeout = args.timeout_s.or(rt.timeout_s).map(Duration::from_secs_f64).unwrap_or(DEFAULT_TIMEOUT);
    let report = match args.report.or_else(|| rt.report.clone()) {
        Some(p) => p,
        None => ctx.out_dir()?.join("client.csv"),
    };
    let val = ctx.cfg.data.load_val()?;
    let n = args.images.or(rt.images).unwrap_or(100).min(val.len());
    let head = model.split()?.head;
    let mut client = Client::connect(endpoint.as_str(), timeout)?;
    let mut w = csv::Writer::from_path(&report)?;
    let (mut correct, mut total_s) = (0, 0.0);
    for i in 0..n {
        let r = client.infer(&head, &val.images.select(&[i]), codec)?;
        correct += (r.label == val.labels[i]) as usize;
        total_s += r.breakdown.total_s;
        w.serialize(ClientRow {
            index: i,
            true_label: val.labels[i],
            label: r.label,
            payload_bytes: r.payload.len(),
            head_s: r.breakdown.head_s,
            serialize_s: r.breakdown.serialize_s,
            network_s: r.breakdown.network_s,
            tail_s: r.breakdown.tail_s,
            total_s: r.breakdown.total_s,
        })?;
    }
    w.flush()?;
    if n > 0 {
        println!(
            "{n} images via {codec}: top-1 {:.2}%, mean end-to-end {:.2} ms, report {}",
            100.0 * correct as f64 / n as f64,
            1e3 * total_s / n as f64,
            report.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Choice {
    model: String,
    channel: String,
    rate_bps: f64,
    strategy: Strategy,
    d_e2e_s: f64,
    energy_j: f64,
}

#[derive(Serialize)]
struct Crossover {
    model: String,
    analytic_bps: Option<f64>,
    simulated_bps: Option<f64>,
}

#[derive(Serialize)]
struct SimulateSummary {
    energy_model: &'static str,
    rows: usize,
    choices: Vec<Choice>,
    split_edge_crossovers: Vec<Crossover>,
}

const ENERGY_MODEL: &str =
    "device energy = p_head * d_head + p_net * (d_net_up + d_net_down) + p_idle * d_tail (one integration of device power over the delay terms)";

fn run_models(dirs: &[PathBuf], jpeg_bytes: Option<u64>) -> CliResult<Vec<SweepModel>> {
    let missing: Vec<PathBuf> = dirs.iter().map(|d| d.join(SUMMARY_FILE)).filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    dirs.iter()
        .map(|dir| {
            let s: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
            let (mut payload, mut top1) = (Codec::Bq8.payload_len(&s.bottleneck_shape) as u64, s.top1);
            if dir.join(EVAL_FILE).exists() {
                let e: EvalSummary = read_json(&dir.join(EVAL_FILE))?;
                if let Some(r) = e.codecs.get("bq8") {
                    payload = r.payload_bytes;
                    top1 = r.top1;
                }
            }
            Ok(SweepModel {
                name: format!("{}_{}_s{}", s.recipe, s.split_point, s.seed),
                split_point: s.split_point,
                channels: s.channels,
                codec: "bq8".into(),
                payload_bytes: payload,
                input_bytes: jpeg_bytes.unwrap_or(s.input_shape.iter().product::<usize>() as u64),
                top1,
            })
        })
        .collect()
}

fn delay_series(rows: &[SweepRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry(format!("{} {}", r.model_name, r.strategy)).or_default().push((r.rate_bps, r.d_e2e_s));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let s = &ctx.cfg.simulate;
    let channels = s.all_channels()?;
    let profiles = s.all_profiles()?;
    let mut models = s.models.clone();
    models.extend(run_models(&s.runs, s.jpeg_bytes)?);
    if models.is_empty() {
        return Err(CliError::Config("no models to simulate (simulate.models or simulate.runs)".into()));
    }
    let strategies: BTreeSet<Strategy> = s.strategies.iter().copied().collect();
    let options = SweepOptions { response_bytes: s.response_bytes, t0: s.t0 };
    let rows = sweep(&models, &channels, &profiles, &strategies, options)?;
    let out = ctx.out_dir()?;

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut choices = Vec::new();
    for chunk in rows.chunks(strategies.len().max(1)) {
        if let Some(st) = choose_strategy(chunk) {
            let r = chunk.iter().find(|r| r.strategy == st).expect("chosen strategy is among the rows");
            choices.push(Choice {
                model: r.model_name.clone(),
                channel: r.channel.clone(),
                rate_bps: r.rate_bps,
                strategy: st,
                d_e2e_s: r.d_e2e_s,
                energy_j: r.energy_j,
            });
        }
    }
    let rtt = s.rate_sweep.as_ref().map(|r| r.rtt_s).unwrap_or(0.0);
    let mut crossovers = Vec::new();
    if strategies.contains(&Strategy::Split) && strategies.contains(&Strategy::Edge) {
        for m in &models {
            let split = splitcomp_core::sim::lookup_profile(&profiles, &m.name, Strategy::Split)?;
            let edge = splitcomp_core::sim::lookup_profile(&profiles, &m.name, Strategy::Edge)?;
            crossovers.push(Crossover {
                model: m.name.clone(),
                analytic_bps: split_edge_crossover(split, edge, m.input_bytes, m.payload_bytes),
                simulated_bps: simulated_crossover(m, &profiles, rtt, s.response_bytes, 1.0, 1e13)?,
            });
        }
    }
    let summary = SimulateSummary { energy_model: ENERGY_MODEL, rows: rows.len(), choices, split_edge_crossovers: crossovers };
    write_json(&out.join("summary.json"), &summary)?;

    plot::delay_vs_rate(&out.join("delay_vs_rate.svg"), &delay_series(&rows))?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for m in &models {
        groups.entry(format!("{} {}", m.split_point, m.codec)).or_default().push((m.payload_bytes as f64, 100.0 * m.top1));
    }
    plot::size_vs_accuracy(&out.join("size_vs_accuracy.svg"), &groups)?;
    println!("{} sweep rows written to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    model: String,
    recipe: String,
    split_point: String,
    channels: usize,
    seeds: usize,
    top1: f64,
    teacher_top1: f64,
    bq8_top1: Option<f64>,
    payload_bytes: u64,
}

pub fn report(ctx: &Context, runs: Vec<PathBuf>, sweep_csv: Option<PathBuf>) -> CliResult<()> {
    let runs = if runs.is_empty() { ctx.cfg.report.runs.clone() } else { runs };
    if runs.is_empty() {
        return Err(CliError::NoRuns);
    }
    let sweep_csv = sweep_csv.or_else(|| ctx.cfg.report.sweep.clone());
    let mut missing = missing_run_files(&runs);
    if let Some(p) = sweep_csv.as_ref().filter(|p| !p.exists()) {
        missing.push(p.clone());
    }
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }

    type Key = (String, String, String, usize);
    let mut groups: BTreeMap<Key, Vec<(RunSummary, Option<EvalSummary>)>> = BTreeMap::new();
    for dir in &runs {
        let s: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
        let e = if dir.join(EVAL_FILE).exists() { Some(read_json::<EvalSummary>(&dir.join(EVAL_FILE))?) } else { None };
        groups.entry((s.arch.clone(), s.recipe.clone(), s.split_point.clone(), s.channels)).or_default().push((s, e));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut entries, mut rows) = (Vec::new(), Vec::new());
    let mut points: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((arch, recipe, split_point, channels), members) in &groups {
        let top1 = mean(&members.iter().map(|(s, _)| s.top1).collect::<Vec<_>>());
        let teacher_top1 = mean(&members.iter().map(|(s, _)| s.teacher_top1).collect::<Vec<_>>());
        let bq8: Vec<f64> = members.iter().filter_map(|(_, e)| e.as_ref()?.codecs.get("bq8").map(|r| r.top1)).collect();
        let payload_bytes = Codec::Bq8.payload_len(&members[0].0.bottleneck_shape) as u64;
        entries.push(AccuracyEntry {
            model: arch.clone(),
            recipe: recipe.clone(),
            split_point: split_point.clone(),
            channels: *channels,
            top1,
            teacher_top1,
        });
        points.entry(recipe.clone()).or_default().push((payload_bytes as f64, 100.0 * top1));
        rows.push(ReportRow {
            model: arch.clone(),
            recipe: recipe.clone(),
            split_point: split_point.clone(),
            channels: *channels,
            seeds: members.len(),
            top1,
            teacher_top1,
            bq8_top1: (bq8.len() == members.len()).then(|| mean(&bq8)),
            payload_bytes,
        });
    }

    let out = ctx.out_dir()?;
    let table = accuracy_table(&entries);
    fs::write(out.join("accuracy.md"), &table)?;
    let mut w = csv::Writer::from_path(out.join("accuracy.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    plot::size_vs_accuracy(&out.join("size_vs_accuracy.svg"), &points)?;
    if let Some(path) = sweep_csv {
        let rows: Vec<SweepRow> = csv::Reader::from_path(&path)?.deserialize().collect::<Result<_, _>>()?;
        plot::delay_vs_rate(&out.join("delay_vs_rate.svg"), &delay_series(&rows))?;
    }
    print!("{table}");
    Ok(())
}
