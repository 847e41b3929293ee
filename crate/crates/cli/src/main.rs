//! `radarlift` command-line front end.

mod frames;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use radarlift::cloud::{crop_to_range, LIDAR_SCHEMA, RADAR_SCHEMA};
use radarlift::curriculum::{
    build_schedule, emit_manifest, parse_notation_with, EpochConfig, ManifestPaths, ParseOptions,
};
use radarlift::distill::{
    detection_loss, feature_kd_loss, joint_loss, label_kd_targets, logit_kd_loss, AnchorTemplate,
    ChannelAlign, FeatureKdParams, LogitKdParams, LossComponents, LossReport, LossWeights,
    MatcherParams, DEFAULT_SCORE_THRESHOLD,
};
use radarlift::eval::{evaluate, group_by_frame, EvalConfig, Interpolation};
use radarlift::io::{self, BoxRecord, CloudMeta, TensorRole};
use radarlift::mixing::{merge_clouds, pillar_index, pillarize_prioritized, PillarParams};
use radarlift::sampling::{
    dedup_points, thin_out, thin_out_sequence, Share, ThinOutMethod, DEFAULT_VOXEL_SIZE,
};
use radarlift::synth::{generate_frames, support_detector, DetectorParams, SceneSpec};
use radarlift::{seed, Error, PointCloud, Range3D, Source};

use frames::{partner, Job};

#[derive(Parser)]
#[command(
    name = "radarlift",
    version,
    about = "Lidar thin-out, radar mixing, distillation losses and evaluation"
)]
struct Cli {
    /// Global seed; per-frame seeds are derived from it and the frame id.
    #[arg(long, global = true, env = "RADARLIFT_SEED")]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,

    /// JSON config file with defaults for any subcommand.
    #[arg(long, global = true, env = "RADARLIFT_CONFIG")]
    config: Option<PathBuf>,

    /// Box list output format.
    #[arg(long, global = true, value_enum)]
    format: Option<BoxFormat>,

    /// Channel names for lidar files without a sidecar.
    #[arg(long, global = true, value_delimiter = ',')]
    lidar_schema: Option<Vec<String>>,

    /// Channel names for radar files without a sidecar.
    #[arg(long, global = true, value_delimiter = ',')]
    radar_schema: Option<Vec<String>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BoxFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CropOrder {
    /// Crop to the range, then thin out.
    Before,
    /// Thin out, then crop to the range.
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Random,
    Knn,
    Voxel,
}

/// Defaults read from `--config`. Command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    seed: Option<u64>,
    jobs: Option<usize>,
    format: Option<BoxFormat>,
    range: Option<Range3D>,
    crop_order: Option<CropOrder>,
    voxel_size: Option<[f64; 3]>,
    pillar: Option<PillarParams>,
    eval: Option<EvalConfig>,
    weights: Option<LossWeights>,
    scene: Option<SceneSpec>,
    epochs: Option<EpochConfig>,
    detector: Option<DetectorParams>,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce lidar clouds to a share of their points.
    ThinOut(ThinOutArgs),
    /// Merge radar and lidar clouds with a source indicator channel.
    Mix(MixArgs),
    /// Group mixed clouds into pillars, radar points first.
    Pillarize(PillarizeArgs),
    /// Evaluate the distillation losses on exported tensors.
    KdLoss(KdLossArgs),
    /// Range-binned average precision of detections.
    Eval(EvalArgs),
    /// Expand a training notation into a stage manifest.
    Schedule(ScheduleArgs),
    /// Generate synthetic frames.
    GenScene(GenSceneArgs),
    /// Remove exactly repeated points.
    Dedup(InOut),
    /// Keep points inside a range.
    Crop(CropArgs),
    /// Stand-in detector reporting ground truth supported by enough points.
    Detect(DetectArgs),
}

#[derive(Args)]
struct InOut {
    /// Input cloud or directory of clouds.
    #[arg(value_name = "INPUT", required_unless_present = "input_flag")]
    input: Option<PathBuf>,
    /// Output cloud or directory.
    #[arg(value_name = "OUTPUT", required_unless_present = "output_flag")]
    output: Option<PathBuf>,
    #[arg(long = "input", value_name = "INPUT", conflicts_with = "input")]
    input_flag: Option<PathBuf>,
    #[arg(long = "output", value_name = "OUTPUT", conflicts_with = "output")]
    output_flag: Option<PathBuf>,
}

impl InOut {
    fn paths(&self) -> (PathBuf, PathBuf) {
        let pick = |a: &Option<PathBuf>, b: &Option<PathBuf>| {
            a.clone()
                .or_else(|| b.clone())
                .expect("clap enforces presence")
        };
        (
            pick(&self.input_flag, &self.input),
            pick(&self.output_flag, &self.output),
        )
    }
}

#[derive(Args)]
struct ThinOutArgs {
    #[command(flatten)]
    io: InOut,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Share of points to keep, e.g. `1/16`, `1/2^4` or `0.25`.
    #[arg(long, required_unless_present = "depth", conflicts_with = "depth")]
    share: Option<Share>,
    /// Write every stage of the halving sequence down to `1/2^depth`.
    #[arg(long)]
    depth: Option<u32>,
    /// Voxel edge length, one value or `x,y,z`.
    #[arg(long, value_parser = parse_voxel)]
    voxel_size: Option<[f64; 3]>,
    /// Radar cloud or directory, required for knn.
    #[arg(long)]
    radar: Option<PathBuf>,
    /// Crop to the range before or after thinning.
    #[arg(long)]
    crop: bool,
    /// Crop range `x0,y0,z0,x1,y1,z1`; implies `--crop`.
    #[arg(long, value_parser = parse_range)]
    range: Option<Range3D>,
    #[arg(long, value_enum)]
    crop_order: Option<CropOrder>,
}

#[derive(Args)]
struct MixArgs {
    #[arg(value_name = "RADAR", required_unless_present = "radar_flag")]
    radar: Option<PathBuf>,
    #[arg(value_name = "LIDAR", required_unless_present = "lidar_flag")]
    lidar: Option<PathBuf>,
    #[arg(value_name = "OUTPUT", required_unless_present = "output_flag")]
    output: Option<PathBuf>,
    #[arg(long = "radar", value_name = "RADAR", conflicts_with = "radar")]
    radar_flag: Option<PathBuf>,
    #[arg(long = "lidar", value_name = "LIDAR", conflicts_with = "lidar")]
    lidar_flag: Option<PathBuf>,
    #[arg(long = "output", value_name = "OUTPUT", conflicts_with = "output")]
    output_flag: Option<PathBuf>,
}

#[derive(Args)]
struct PillarizeArgs {
    #[command(flatten)]
    io: InOut,
    /// Pillar edge length, one value or `x,y`.
    #[arg(long = "pillar", alias = "pillar-size", value_parser = parse_pillar)]
    pillar: Option<[f64; 2]>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, value_parser = parse_range)]
    range: Option<Range3D>,
}

#[derive(Args)]
struct KdLossArgs {
    /// Student tensor bundle.
    #[arg(long)]
    student: PathBuf,
    /// Teacher tensor bundle.
    #[arg(long)]
    teacher: PathBuf,
    /// Ground-truth boxes of the frame.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Scored teacher detections for label distillation.
    #[arg(long)]
    teacher_preds: Option<PathBuf>,
    /// Teacher score threshold for label distillation.
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    tau: f64,
    /// Loss weights JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Channel alignment JSON applied to student features.
    #[arg(long)]
    align: Option<PathBuf>,
    /// Anchor templates JSON for the detection loss.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// RoI grid size for feature distillation.
    #[arg(long, default_value_t = 7)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections file or directory of box files.
    #[arg(long)]
    dets: PathBuf,
    /// Ground-truth file or directory of box files.
    #[arg(long)]
    gts: PathBuf,
    /// Evaluation config JSON.
    #[arg(long = "eval-config")]
    eval_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    interpolation: Option<InterpArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InterpArg {
    R11,
    R40,
    All,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Training notation, e.g. `RL^MSTM_{1-1/16/vox}->R`.
    notation: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lidar: Option<PathBuf>,
    #[arg(long)]
    radar: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Reject knn thin-out because no radar cloud is available.
    #[arg(long)]
    no_radar: bool,
    #[arg(long)]
    initial_epochs: Option<u32>,
    #[arg(long)]
    refinement_epochs: Option<u32>,
    #[arg(long)]
    fine_tune_epochs: Option<u32>,
}

#[derive(Args)]
struct GenSceneArgs {
    /// Scene spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    frames: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    #[command(flatten)]
    io: InOut,
    #[arg(long, value_parser = parse_range)]
    range: Option<Range3D>,
}

#[derive(Args)]
struct DetectArgs {
    /// Cloud file or directory of clouds named by frame id.
    #[arg(long)]
    clouds: PathBuf,
    /// Ground-truth file or directory.
    #[arg(long)]
    gts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_points: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
}

fn floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

fn parse_voxel(s: &str) -> Result<[f64; 3], String> {
    let v = floats(s)?;
    let out = match v.as_slice() {
        [a] => [*a, *a, *a],
        [a, b, c] => [*a, *b, *c],
        _ => return Err("expected one value or x,y,z".into()),
    };
    if !out.iter().all(|x| x.is_finite() && *x > 0.0) {
        return Err("voxel size must be positive".into());
    }
    Ok(out)
}

fn parse_pillar(s: &str) -> Result<[f64; 2], String> {
    let v = floats(s)?;
    match v.as_slice() {
        [a] => Ok([*a, *a]),
        [a, b] => Ok([*a, *b]),
        _ => Err("expected one value or x,y".into()),
    }
}

fn parse_range(s: &str) -> Result<Range3D, String> {
    let v = floats(s)?;
    if v.len() != 6 {
        return Err("expected x0,y0,z0,x1,y1,z1".into());
    }
    Range3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| e.to_string())
}

struct Ctx {
    seed: Option<u64>,
    format: BoxFormat,
    lidar_meta: CloudMeta,
    radar_meta: CloudMeta,
    config: Config,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn frame_seed(&self, stem: &str) -> u64 {
        seed::derive_str(self.seed(), stem)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

/// Print to stdout; a closed pipe on the reading side is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct FrameCount {
    id: String,
    input: usize,
    output: usize,
}

fn read_lidar(ctx: &Ctx, path: &Path) -> Result<PointCloud> {
    Ok(io::read_cloud(path, Some(&ctx.lidar_meta))?)
}

fn read_radar(ctx: &Ctx, path: &Path) -> Result<PointCloud> {
    Ok(io::read_cloud(path, Some(&ctx.radar_meta))?)
}

fn cmd_thin_out(ctx: &Ctx, a: &ThinOutArgs) -> Result<()> {
    let (input, output) = a.io.paths();
    let voxel = a
        .voxel_size
        .or(ctx.config.voxel_size)
        .unwrap_or(DEFAULT_VOXEL_SIZE);
    let method = match a.method {
        MethodArg::Random => ThinOutMethod::Random,
        MethodArg::Knn => ThinOutMethod::Knn,
        MethodArg::Voxel => ThinOutMethod::Voxel { voxel_size: voxel },
    };
    if a.method == MethodArg::Knn && a.radar.is_none() {
        return Err(usage("knn thin-out needs --radar"));
    }
    if let Some(share) = a.share {
        if a.method == MethodArg::Voxel && share.half_exponent().is_none() {
            return Err(usage(format!(
                "voxel thin-out needs a power-of-half share, got {share}"
            )));
        }
    }
    if a.depth == Some(0) {
        return Err(usage("--depth must be at least 1"));
    }
    let crop = (a.crop || a.range.is_some()).then(|| {
        a.range
            .or(ctx.config.range)
            .unwrap_or_else(Range3D::detector_default)
    });
    let order = a
        .crop_order
        .or(ctx.config.crop_order)
        .unwrap_or(CropOrder::Before);
    let jobs = frames::plan(&input, &output, None)?;

    let results = frames::run(&jobs, |job| {
        let mut lidar = read_lidar(ctx, &job.input)?;
        let n_in = lidar.len();
        let radar = match &a.radar {
            Some(r) => Some(read_radar(ctx, &partner(r, &job.stem, "radar")?)?),
            None => None,
        };
        if let (Some(range), CropOrder::Before) = (&crop, order) {
            lidar = crop_to_range(&lidar, range);
        }
        let finish = |c: PointCloud| match (&crop, order) {
            (Some(range), CropOrder::After) => crop_to_range(&c, range),
            _ => c,
        };
        let s = ctx.frame_seed(&job.stem);
        match (a.share, a.depth) {
            (Some(share), _) => {
                let out = finish(thin_out(&lidar, method, share, s, radar.as_ref())?);
                io::write_cloud(&job.output, &out)?;
                Ok(vec![(share, n_in, out.len())])
            }
            (None, Some(depth)) => {
                let seq = thin_out_sequence(&lidar, method, depth, s, radar.as_ref())?;
                let name = job.input.file_name().expect("input is a file");
                let mut counts = Vec::new();
                for (k, stage) in seq.stages.iter().enumerate().skip(1) {
                    let out = finish(stage.cloud.clone());
                    io::write_cloud(&output.join(format!("stage_{k}")).join(name), &out)?;
                    counts.push((stage.share, n_in, out.len()));
                }
                Ok(counts)
            }
            (None, None) => unreachable!("clap requires --share or --depth"),
        }
    })?;

    #[derive(Serialize)]
    struct Row {
        id: String,
        share: String,
        input: usize,
        output: usize,
    }
    let rows: Vec<Row> = jobs
        .iter()
        .zip(results)
        .flat_map(|(job, counts)| {
            counts.into_iter().map(move |(share, input, output)| Row {
                id: job.stem.clone(),
                share: share.to_string(),
                input,
                output,
            })
        })
        .collect();
    print_json(&serde_json::json!({ "method": method.name(), "frames": rows }))
}

fn cmd_mix(ctx: &Ctx, a: &MixArgs) -> Result<()> {
    let pick = |x: &Option<PathBuf>, y: &Option<PathBuf>| {
        x.clone()
            .or_else(|| y.clone())
            .expect("clap enforces presence")
    };
    let radar = pick(&a.radar_flag, &a.radar);
    let lidar = pick(&a.lidar_flag, &a.lidar);
    let output = pick(&a.output_flag, &a.output);
    let jobs = frames::plan(&lidar, &output, None)?;
    let counts = frames::run(&jobs, |job| {
        let l = read_lidar(ctx, &job.input)?;
        let r = read_radar(ctx, &partner(&radar, &job.stem, "radar")?)?;
        let mixed = merge_clouds(&r, &l)?;
        io::write_cloud(&job.output, &mixed)?;
        Ok(
            serde_json::json!({ "id": job.stem, "radar": r.len(), "lidar": l.len(), "output": mixed.len() }),
        )
    })?;
    print_json(&serde_json::json!({ "frames": counts }))
}

fn cmd_pillarize(ctx: &Ctx, a: &PillarizeArgs) -> Result<()> {
    let mut params = ctx.config.pillar.unwrap_or_default();
    if let Some(p) = a.pillar {
        params.pillar_size = p;
    }
    if let Some(m) = a.max_points {
        params.max_points = m;
    }
    if let Some(r) = a.range {
        params.range = r;
    }
    params.validate()?;
    let (input, output) = a.io.paths();
    let jobs = frames::plan(&input, &output, Some("pillars"))?;
    let counts = frames::run(&jobs, |job| {
        let mixed = io::read_cloud(
            &job.input,
            Some(&CloudMeta {
                schema: mixed_schema(ctx),
                source: Source::Mixed,
            }),
        )?;
        let grid = pillarize_prioritized(&mixed, &params, ctx.frame_seed(&job.stem))?;
        let (index, payload) = pillar_index(&grid);
        write_pillars(&job.output, &index, &payload)?;
        let radar_kept: usize = grid.pillars.values().map(|p| p.radar_kept()).sum();
        Ok(serde_json::json!({
            "id": job.stem,
            "pillars": grid.pillars.len(),
            "points": grid.total_points(),
            "radar_points": radar_kept,
        }))
    })?;
    print_json(&serde_json::json!({ "params": params, "frames": counts }))
}

fn mixed_schema(ctx: &Ctx) -> Vec<String> {
    let mut s = ctx.radar_meta.schema.clone();
    s.push(radarlift::cloud::SOURCE_CHANNEL.to_string());
    s
}

fn write_pillars(
    path: &Path,
    index: &radarlift::mixing::PillarIndex,
    payload: &[f32],
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, io::f32s_to_bytes(payload)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    io::write_json(&io::sidecar_path(path), index)?;
    Ok(())
}

fn read_box_records(path: &Path) -> Result<Vec<BoxRecord>> {
    if !path.is_dir() {
        return Ok(io::read_boxes(path)?);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("cannot list {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(io::read_boxes(&f)?);
    }
    Ok(out)
}

fn write_box_records(ctx: &Ctx, path: &Path, records: &[BoxRecord]) -> Result<()> {
    match ctx.format {
        BoxFormat::Json => io::write_boxes(path, records)?,
        BoxFormat::Csv => io::write_boxes_csv(path, records)?,
    }
    Ok(())
}

fn cmd_kd_loss(ctx: &Ctx, a: &KdLossArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(usage("--tau must lie in [0, 1]"));
    }
    if a.grid == 0 {
        return Err(usage("--grid must be at least 1"));
    }
    if a.teacher_preds.is_some() && a.gt.is_none() {
        return Err(usage("--teacher-preds needs --gt"));
    }
    let weights = match &a.weights {
        Some(p) => io::read_json::<LossWeights>(p)?,
        None => ctx.config.weights.unwrap_or_default(),
    };
    weights.validate()?;
    let student = io::read_tensors(&a.student)?;
    let teacher = io::read_tensors(&a.teacher)?;
    let gt = match &a.gt {
        Some(p) => Some(
            read_box_records(p)?
                .iter()
                .map(BoxRecord::to_box)
                .collect::<radarlift::Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let align = a
        .align
        .as_deref()
        .map(io::read_json::<ChannelAlign>)
        .transpose()?;
    let templates = match &a.anchors {
        Some(p) => io::read_json::<Vec<AnchorTemplate>>(p)?,
        None => AnchorTemplate::defaults(),
    };

    let mut c = LossComponents::default();
    let mut computed = Vec::new();
    if let (Some(sc), Some(tc), Some(sr), Some(tr)) = (
        student.map(TensorRole::Cls),
        teacher.map(TensorRole::Cls),
        student.regression(TensorRole::Reg),
        teacher.regression(TensorRole::Reg),
    ) {
        let l = logit_kd_loss(sc, tc, sr, tr, &LogitKdParams::default())?;
        c.l_logit_cls = l.l_cls;
        c.l_logit_reg = l.l_reg;
        computed.extend(["l_l-cls", "l_l-reg"]);
    }
    if let (Some(fs), Some(ft), Some(gt)) = (
        student.map(TensorRole::Feat),
        teacher.map(TensorRole::Feat),
        &gt,
    ) {
        let params = FeatureKdParams {
            grid: a.grid,
            ..FeatureKdParams::default()
        };
        c.l_feat = feature_kd_loss(fs, ft, gt, align.as_ref(), &params)?;
        computed.push("l_feat");
    }
    if let (Some(cls), Some(reg), Some(gt)) = (
        student.map(TensorRole::AnchorCls),
        student.regression(TensorRole::AnchorReg),
        &gt,
    ) {
        let geometry = cls
            .geometry()
            .ok_or_else(|| usage("anchor classification map needs BEV geometry"))?;
        let preds = match &a.teacher_preds {
            Some(p) => read_box_records(p)?
                .iter()
                .map(BoxRecord::to_box)
                .collect::<radarlift::Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let targets = label_kd_targets(gt, &preds, a.tau)?;
        let params = MatcherParams::new(geometry, cls.height(), cls.width(), templates);
        let d = detection_loss(cls, reg, &targets, &params)?;
        c.l_cls = d.l_cls;
        c.l_reg = d.l_reg;
        computed.extend(["l_cls", "l_reg"]);
    }
    if computed.is_empty() {
        return Err(usage(
            "tensor bundles hold no matching tensors for any loss term",
        ));
    }

    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        report: LossReport,
        weights: LossWeights,
        computed: Vec<&'a str>,
    }
    let out = Out {
        report: joint_loss(c, &weights)?,
        weights,
        computed,
    };
    if let Some(p) = &a.out {
        io::write_json(p, &out)?;
    }
    print_json(&out)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let mut config = match &a.eval_config {
        Some(p) => io::read_json::<EvalConfig>(p)?,
        None => ctx.config.eval.clone().unwrap_or_default(),
    };
    if let Some(i) = a.interpolation {
        config.interpolation = match i {
            InterpArg::R11 => Interpolation::R11,
            InterpArg::R40 => Interpolation::R40,
            InterpArg::All => Interpolation::All,
        };
    }
    config.validate()?;
    let dets = group_by_frame(&read_box_records(&a.dets)?)?;
    let gts = group_by_frame(&read_box_records(&a.gts)?)?;
    let report = evaluate(&dets, &gts, &config)?;
    if let Some(p) = &a.out {
        io::write_json(p, &report)?;
    }
    print_json(&report)
}

fn cmd_schedule(ctx: &Ctx, a: &ScheduleArgs) -> Result<()> {
    let options = ParseOptions {
        radar_available: !a.no_radar,
    };
    let spec = parse_notation_with(&a.notation, &options).map_err(Error::from)?;
    let mut epochs = ctx.config.epochs.unwrap_or_default();
    if let Some(e) = a.initial_epochs {
        epochs.initial = e;
    }
    if let Some(e) = a.refinement_epochs {
        epochs.refinement = e;
    }
    if let Some(e) = a.fine_tune_epochs {
        epochs.fine_tune = e;
    }
    let plan = build_schedule(&spec, &epochs);
    let defaults = ManifestPaths::default();
    let paths = ManifestPaths {
        lidar: a.lidar.clone().unwrap_or(defaults.lidar),
        radar: a.radar.clone().unwrap_or(defaults.radar),
        work_dir: a.work_dir.clone().unwrap_or(defaults.work_dir),
    };
    let manifest = emit_manifest(&plan, &paths, ctx.seed());
    if let Some(p) = &a.out {
        io::write_json(p, &manifest)?;
    }
    print_json(&manifest)
}

fn cmd_gen_scene(ctx: &Ctx, a: &GenSceneArgs) -> Result<()> {
    if a.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let mut spec = match &a.spec {
        Some(p) => io::read_json::<SceneSpec>(p)?,
        None => ctx.config.scene.clone().unwrap_or_default(),
    };
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let frames = generate_frames(&spec, a.frames)?;
    let ext = match ctx.format {
        BoxFormat::Json => "json",
        BoxFormat::Csv => "csv",
    };
    let mut all = Vec::new();
    for f in &frames {
        io::write_cloud(
            &a.out_dir.join("lidar").join(format!("{}.bin", f.id)),
            &f.lidar,
        )?;
        io::write_cloud(
            &a.out_dir.join("radar").join(format!("{}.bin", f.id)),
            &f.radar,
        )?;
        let recs: Vec<BoxRecord> = f.gt.iter().map(|b| BoxRecord::from_box(&f.id, b)).collect();
        write_box_records(
            ctx,
            &a.out_dir.join("gt").join(format!("{}.{ext}", f.id)),
            &recs,
        )?;
        all.extend(recs);
    }
    write_box_records(ctx, &a.out_dir.join(format!("gt.{ext}")), &all)?;
    io::write_json(&a.out_dir.join("scene.json"), &spec)?;
    let rows: Vec<_> = frames
        .iter()
        .map(|f| serde_json::json!({ "id": f.id, "lidar": f.lidar.len(), "radar": f.radar.len(), "boxes": f.gt.len() }))
        .collect();
    print_json(&serde_json::json!({ "seed": spec.seed, "frames": rows }))
}

fn cmd_per_frame(
    ctx: &Ctx,
    io_args: &InOut,
    f: impl Fn(&PointCloud) -> PointCloud + Sync,
) -> Result<()> {
    let (input, output) = io_args.paths();
    let jobs: Vec<Job> = frames::plan(&input, &output, None)?;
    let rows = frames::run(&jobs, |job| {
        let cloud = read_lidar(ctx, &job.input)?;
        let out = f(&cloud);
        io::write_cloud(&job.output, &out)?;
        Ok(FrameCount {
            id: job.stem.clone(),
            input: cloud.len(),
            output: out.len(),
        })
    })?;
    print_json(&serde_json::json!({ "frames": rows }))
}

fn cmd_detect(ctx: &Ctx, a: &DetectArgs) -> Result<()> {
    let mut params = ctx.config.detector.unwrap_or_default();
    if let Some(m) = a.min_points {
        params.min_points = m;
    }
    if let Some(s) = a.scale {
        if !(s.is_finite() && s > 0.0) {
            return Err(usage("--scale must be positive"));
        }
        params.scale = s;
    }
    let gts = group_by_frame(&read_box_records(&a.gts)?)?;
    if !a.clouds.is_dir() && gts.len() > 1 {
        return Err(usage(
            "--clouds must be a directory when ground truth spans several frames",
        ));
    }
    let ids: Vec<&String> = gts.keys().collect();
    let dets = {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|id| {
                let cloud = read_lidar(ctx, &partner(&a.clouds, id, "input")?)?;
                let found = support_detector(&cloud, &gts[*id], &params);
                Ok(found
                    .iter()
                    .map(|b| BoxRecord::from_box(id, b))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?
    };
    let records: Vec<BoxRecord> = dets.into_iter().flatten().collect();
    write_box_records(ctx, &a.out, &records)?;
    print_json(&serde_json::json!({ "frames": ids.len(), "detections": records.len() }))
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => io::read_json::<Config>(p)?,
        None => Config::default(),
    };
    let jobs = cli.jobs.or(config.jobs);
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let meta = |schema: &Option<Vec<String>>, default: &[&str], source| CloudMeta {
        schema: schema
            .clone()
            .unwrap_or_else(|| default.iter().map(|s| s.to_string()).collect()),
        source,
    };
    let ctx = Ctx {
        seed: cli.seed.or(config.seed),
        format: cli.format.or(config.format).unwrap_or(BoxFormat::Json),
        lidar_meta: meta(&cli.lidar_schema, &LIDAR_SCHEMA, Source::Lidar),
        radar_meta: meta(&cli.radar_schema, &RADAR_SCHEMA, Source::Radar),
        config,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("cannot start worker threads")?;
    pool.install(|| match &cli.command {
        Command::ThinOut(a) => cmd_thin_out(&ctx, a),
        Command::Mix(a) => cmd_mix(&ctx, a),
        Command::Pillarize(a) => cmd_pillarize(&ctx, a),
        Command::KdLoss(a) => cmd_kd_loss(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Schedule(a) => cmd_schedule(&ctx, a),
        Command::GenScene(a) => cmd_gen_scene(&ctx, a),
        Command::Dedup(a) => cmd_per_frame(&ctx, a, dedup_points),
        Command::Crop(a) => {
            let range = a
                .range
                .or(ctx.config.range)
                .unwrap_or_else(Range3D::detector_default);
            cmd_per_frame(&ctx, &a.io, |c| crop_to_range(c, &range))
        }
        Command::Detect(a) => cmd_detect(&ctx, a),
    })
}

/// Error kind and exit code: 2 for caller mistakes, 1 for everything else.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => ("invalid_argument", 2),
                Error::Notation(_) => ("notation", 2),
                Error::Shape(_) => ("shape", 2),
                Error::InvalidCloud(_) => ("invalid_cloud", 1),
                Error::Infeasible(_) => ("infeasible", 1),
                Error::Io { .. } => ("io", 1),
                Error::Format { .. } => ("format", 1),
            };
        }
        if cause.is::<std::io::Error>() {
            return ("io", 1);
        }
    }
    ("error", 1)
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let msg = serde_json::json!({
                "error": { "kind": kind, "message": message(&err), "exit_code": code }
            });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
