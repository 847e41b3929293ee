//! Training-notation grammar and multi-stage schedule generation.
//!
//! A notation string such as `RL^MSTM_{1-1/16/vox}->R^feat` names the
//! pre-training data, the training method, the lidar share (a range for
//! multi-stage training), the thin-out method and an optional radar
//! fine-tuning step with a distillation variant.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_json;
use crate::sampling::Share;

/// Parse failure with the character offset it was detected at.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("notation error at position {pos}: {message}")]
pub struct NotationError {
    pub pos: usize,
    pub message: String,
}

fn fail<T>(pos: usize, message: impl Into<String>) -> Result<T, NotationError> {
    Err(NotationError {
        pos,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataMode {
    L,
    R,
    RL,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::L => "L",
            DataMode::R => "R",
            DataMode::RL => "RL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TrainMethod {
    Sstm,
    Mstm,
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMethod::Sstm => "SSTM",
            TrainMethod::Mstm => "MSTM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThinOutKind {
    Rand,
    Knn,
    Vox,
}

impl ThinOutKind {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rand" | "random" => Some(ThinOutKind::Rand),
            "knn" => Some(ThinOutKind::Knn),
            "vox" | "voxel" | "v" => Some(ThinOutKind::Vox),
            _ => None,
        }
    }

    /// Method name accepted by the `thin-out` command.
    pub fn cli_name(self) -> &'static str {
        match self {
            ThinOutKind::Rand => "random",
            ThinOutKind::Knn => "knn",
            ThinOutKind::Vox => "voxel",
        }
    }
}

impl fmt::Display for ThinOutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThinOutKind::Rand => "rand",
            ThinOutKind::Knn => "knn",
            ThinOutKind::Vox => "vox",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdMethod {
    Lab,
    Log,
    Feat,
    Joint,
}

impl KdMethod {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" | "label" => Some(KdMethod::Lab),
            "log" | "logit" => Some(KdMethod::Log),
            "feat" | "feature" => Some(KdMethod::Feat),
            "joint" => Some(KdMethod::Joint),
            _ => None,
        }
    }
}

impl fmt::Display for KdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdMethod::Lab => "lab",
            KdMethod::Log => "log",
            KdMethod::Feat => "feat",
            KdMethod::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LidarShare {
    Single { share: Share },
    Range { start: Share, end: Share },
}

impl LidarShare {
    /// Shares visited in order, halving from start to end.
    pub fn shares(&self) -> Vec<Share> {
        match *self {
            LidarShare::Single { share } => vec![share],
            LidarShare::Range { start, end } => {
                let (a, b) = (
                    start.half_exponent().expect("validated"),
                    end.half_exponent().expect("validated"),
                );
                (a..=b).map(Share::half_pow).collect()
            }
        }
    }
}

impl fmt::Display for LidarShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LidarShare::Single { share } => write!(f, "{share}"),
            LidarShare::Range { start, end } => write!(f, "{start}-{end}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTune {
    pub data: DataMode,
    pub kd: Option<KdMethod>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub data: DataMode,
    pub method: TrainMethod,
    pub share: Option<LidarShare>,
    pub thin_out: Option<ThinOutKind>,
    pub target: Option<FineTune>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// Whether a radar cloud exists to drive knn thin-out.
    pub radar_available: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            radar_available: true,
        }
    }
}

struct Cursor<'a> {
    chars: Vec<(usize, char)>,
    text: &'a str,
    i: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            chars: text.char_indices().collect(),
            text,
            i: 0,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).map(|c| c.1)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.i += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn byte(&self, i: usize) -> usize {
        self.chars.get(i).map_or(self.text.len(), |c| c.0)
    }

    /// Consume while `f` holds; returns the slice and its starting position.
    fn take_while(&mut self, f: impl Fn(char) -> bool) -> (&'a str, usize) {
        let start = self.i;
        while self.peek().is_some_and(&f) {
            self.i += 1;
        }
        (&self.text[self.byte(start)..self.byte(self.i)], start)
    }

    fn at_arrow(&self) -> bool {
        self.peek() == Some('→')
            || (self.peek() == Some('-') && self.chars.get(self.i + 1).map(|c| c.1) == Some('>'))
    }

    fn eat_arrow(&mut self) -> bool {
        if self.eat('→') {
            return true;
        }
        if self.at_arrow() {
            self.i += 2;
            return true;
        }
        false
    }
}

fn parse_data(cur: &mut Cursor<'_>) -> Result<DataMode, NotationError> {
    let (tok, pos) = cur.take_while(|c| c.is_ascii_alphabetic());
    match tok {
        "L" => Ok(DataMode::L),
        "R" => Ok(DataMode::R),
        "RL" => Ok(DataMode::RL),
        "" => fail(pos, "expected training data L, R or RL"),
        other => fail(
            pos,
            format!("unknown training data `{other}`, expected L, R or RL"),
        ),
    }
}

fn parse_share_at(text: &str, pos: usize) -> Result<Share, NotationError> {
    let share: Share = text.trim().parse().map_err(|_| NotationError {
        pos,
        message: format!("cannot parse lidar share `{}`", text.trim()),
    })?;
    if share.half_exponent().is_none() {
        return fail(pos, format!("lidar share {share} is not a power of 1/2"));
    }
    Ok(share)
}

/// Split `<LS>[/<TO>]` and parse both parts. `pos` is the offset of `inner`.
fn parse_share_part(
    inner: &str,
    pos: usize,
) -> Result<(LidarShare, Option<ThinOutKind>), NotationError> {
    let char_pos = |byte: usize| pos + inner[..byte].chars().count();
    let (ls, thin_out) = match inner.rfind('/') {
        Some(slash)
            if inner[slash + 1..]
                .trim()
                .chars()
                .any(|c| c.is_ascii_alphabetic()) =>
        {
            let name = inner[slash + 1..].trim();
            let kind = ThinOutKind::parse(name).ok_or_else(|| NotationError {
                pos: char_pos(slash + 1),
                message: format!("unknown thin-out method `{name}`, expected rand, knn or vox"),
            })?;
            (&inner[..slash], Some(kind))
        }
        _ => (inner, None),
    };
    if ls.trim().is_empty() {
        return fail(pos, "missing lidar share");
    }
    let share = match ls.find('-') {
        Some(dash) => LidarShare::Range {
            start: parse_share_at(&ls[..dash], pos)?,
            end: parse_share_at(&ls[dash + 1..], char_pos(dash + 1))?,
        },
        None => LidarShare::Single {
            share: parse_share_at(ls, pos)?,
        },
    };
    Ok((share, thin_out))
}

/// Parse a notation string such as `RL^MSTM_{1-1/16/vox}->R`.
pub fn parse_notation(text: &str) -> Result<TrainingSpec, NotationError> {
    parse_notation_with(text, &ParseOptions::default())
}

pub fn parse_notation_with(
    text: &str,
    options: &ParseOptions,
) -> Result<TrainingSpec, NotationError> {
    let mut cur = Cursor::new(text);
    cur.skip_ws();
    let data = parse_data(&mut cur)?;
    if !cur.eat('^') {
        return fail(cur.i, "expected `^` before the training method");
    }
    let (tok, method_pos) = cur.take_while(|c| c.is_ascii_alphabetic());
    let method = match tok.to_ascii_uppercase().as_str() {
        "MSTM" => TrainMethod::Mstm,
        "SSTM" => TrainMethod::Sstm,
        _ => {
            return fail(
                method_pos,
                format!("unknown training method `{tok}`, expected MSTM or SSTM"),
            )
        }
    };

    let mut share = None;
    let mut thin_out = None;
    let share_pos = cur.i;
    if cur.eat('_') {
        let (inner, pos) = if cur.eat('{') {
            let (inner, pos) = cur.take_while(|c| c != '}');
            if !cur.eat('}') {
                return fail(cur.i, "unclosed `{`");
            }
            (inner, pos)
        } else {
            let start = cur.i;
            while cur.peek().is_some()
                && !cur.at_arrow()
                && !cur.peek().is_some_and(char::is_whitespace)
            {
                cur.i += 1;
            }
            (&text[cur.byte(start)..cur.byte(cur.i)], start)
        };
        let (s, t) = parse_share_part(inner, pos)?;
        share = Some(s);
        thin_out = t;
    }

    cur.skip_ws();
    let mut target = None;
    let target_pos = cur.i;
    if cur.eat_arrow() {
        cur.skip_ws();
        let tpos = cur.i;
        let tdata = parse_data(&mut cur)?;
        if tdata != DataMode::R {
            return fail(tpos, format!("fine-tuning target must be R, got {tdata}"));
        }
        let mut kd = None;
        if cur.eat('^') {
            let braced = cur.eat('{');
            let (tok, pos) = cur.take_while(|c| c.is_ascii_alphabetic());
            kd = Some(KdMethod::parse(tok).ok_or_else(|| NotationError {
                pos,
                message: format!(
                    "unknown distillation method `{tok}`, expected lab, log, feat or joint"
                ),
            })?);
            if braced && !cur.eat('}') {
                return fail(cur.i, "unclosed `{`");
            }
        }
        target = Some(FineTune { data: tdata, kd });
    }
    cur.skip_ws();
    if cur.peek().is_some() {
        return fail(
            cur.i,
            format!("unexpected trailing input `{}`", &text[cur.byte(cur.i)..]),
        );
    }

    // radar-only data has no lidar share; `_1` is tolerated and dropped
    if data == DataMode::R {
        match share {
            Some(LidarShare::Single { share: s }) if s == Share::ONE && thin_out.is_none() => {
                share = None
            }
            Some(_) => return fail(share_pos, "radar-only training takes no lidar share"),
            None => {}
        }
    }
    let spec = TrainingSpec {
        data,
        method,
        share,
        thin_out,
        target,
    };
    validate(&spec, options).map_err(|message| NotationError {
        pos: match message.1 {
            Field::Share => share_pos,
            Field::Method => method_pos,
            Field::Target => target_pos,
        },
        message: message.0,
    })?;
    Ok(spec)
}

enum Field {
    Share,
    Method,
    Target,
}

fn validate(
    spec: &TrainingSpec,
    options: &ParseOptions,
) -> std::result::Result<(), (String, Field)> {
    if spec.data == DataMode::R && (spec.share.is_some() || spec.thin_out.is_some()) {
        return Err((
            "radar-only training takes no lidar share".into(),
            Field::Share,
        ));
    }
    match (spec.method, spec.share) {
        (TrainMethod::Mstm, Some(LidarShare::Range { start, end })) => {
            if start.as_f64() < end.as_f64() {
                return Err((
                    format!("share range must decrease, got {start}-{end}"),
                    Field::Share,
                ));
            }
        }
        (TrainMethod::Mstm, _) => {
            return Err((
                "multi-stage training needs a share range such as 1-1/16".into(),
                Field::Method,
            ));
        }
        (TrainMethod::Sstm, Some(LidarShare::Range { .. })) => {
            return Err((
                "single-stage training takes a single share".into(),
                Field::Share,
            ));
        }
        (TrainMethod::Sstm, _) => {}
    }
    for s in spec.share.iter().flat_map(LidarShare::shares) {
        if s.half_exponent().is_none() {
            return Err((
                format!("lidar share {s} is not a power of 1/2"),
                Field::Share,
            ));
        }
    }
    let thins = spec
        .share
        .iter()
        .flat_map(LidarShare::shares)
        .any(|s| s != Share::ONE);
    if thins && spec.thin_out.is_none() {
        return Err((
            "a lidar share below 1 needs a thin-out method".into(),
            Field::Share,
        ));
    }
    if spec.thin_out == Some(ThinOutKind::Knn) && !options.radar_available {
        return Err((
            "knn thin-out needs a radar point cloud".into(),
            Field::Share,
        ));
    }
    if let Some(t) = spec.target {
        if t.data != DataMode::R {
            return Err((
                format!("fine-tuning target must be R, got {}", t.data),
                Field::Target,
            ));
        }
        if spec.data == DataMode::R && spec.method == TrainMethod::Sstm && t.kd.is_none() {
            return Err((
                "fine-tuning radar on radar repeats the same training".into(),
                Field::Target,
            ));
        }
    }
    Ok(())
}

/// Canonical notation for a spec.
pub fn format_notation(spec: &TrainingSpec) -> String {
    let mut s = format!("{}^{}", spec.data, spec.method);
    if let Some(share) = spec.share {
        s.push_str(&format!("_{{{share}"));
        if let Some(t) = spec.thin_out {
            s.push_str(&format!("/{t}"));
        }
        s.push('}');
    }
    if let Some(t) = spec.target {
        s.push_str(&format!("->{}", t.data));
        if let Some(kd) = t.kd {
            s.push_str(&format!("^{kd}"));
        }
    }
    s
}

impl fmt::Display for TrainingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_notation(self))
    }
}

impl FromStr for TrainingSpec {
    type Err = NotationError;

    fn from_str(s: &str) -> Result<Self, NotationError> {
        parse_notation(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochConfig {
    /// Epochs of the first stage.
    pub initial: u32,
    /// Epochs of each refinement stage.
    pub refinement: u32,
    /// Epochs of the radar fine-tuning stage.
    pub fine_tune: u32,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            initial: 125,
            refinement: 30,
            fine_tune: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub index: usize,
    /// Short stage name such as `RL_1/16/vox` or `R^feat`.
    pub name: String,
    pub data: DataMode,
    pub share: Share,
    pub thin_out: Option<ThinOutKind>,
    /// Radar and thinned lidar are merged for this stage.
    pub mixed: bool,
    pub epochs: u32,
    /// Stage whose weights initialize this one; `None` trains from scratch.
    pub init_from: Option<usize>,
    /// Distillation variant and teacher stage for KD fine-tuning.
    pub kd: Option<KdMethod>,
    pub teacher: Option<usize>,
    pub early_stopping: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub notation: String,
    pub stages: Vec<Stage>,
}

fn stage_name(
    data: DataMode,
    share: Share,
    thin_out: Option<ThinOutKind>,
    kd: Option<KdMethod>,
) -> String {
    let mut s = data.to_string();
    if data != DataMode::R {
        s.push_str(&format!("_{share}"));
        if let Some(t) = thin_out {
            s.push_str(&format!("/{t}"));
        }
    }
    if let Some(kd) = kd {
        s.push_str(&format!("^{kd}"));
    }
    s
}

/// Expand a spec into its chain of training stages.
pub fn build_schedule(spec: &TrainingSpec, epochs: &EpochConfig) -> StagePlan {
    let shares = spec.share.map_or_else(|| vec![Share::ONE], |s| s.shares());
    let mut recipes: Vec<(DataMode, Share)> = Vec::new();
    match (spec.data, spec.target) {
        (DataMode::R, _) => recipes.push((DataMode::R, Share::ONE)),
        // lidar pre-training switches to mixed data at the last share
        (DataMode::L, Some(_)) if spec.method == TrainMethod::Mstm => {
            let (last, head) = shares.split_last().expect("non-empty");
            recipes.extend(head.iter().map(|&s| (DataMode::L, s)));
            recipes.push((DataMode::RL, *last));
        }
        (d, _) => recipes.extend(shares.iter().map(|&s| (d, s))),
    }
    let mut stages: Vec<Stage> = recipes
        .into_iter()
        .enumerate()
        .map(|(i, (data, share))| {
            let thin_out = if data == DataMode::R {
                None
            } else {
                spec.thin_out
            };
            Stage {
                index: i,
                name: stage_name(data, share, thin_out, None),
                data,
                share,
                thin_out,
                mixed: data == DataMode::RL,
                epochs: if i == 0 {
                    epochs.initial
                } else {
                    epochs.refinement
                },
                init_from: i.checked_sub(1),
                kd: None,
                teacher: None,
                early_stopping: i == 0 && spec.method == TrainMethod::Sstm,
            }
        })
        .collect();
    if let Some(t) = spec.target {
        let i = stages.len();
        stages.push(Stage {
            index: i,
            name: stage_name(t.data, Share::ONE, None, t.kd),
            data: t.data,
            share: Share::ONE,
            thin_out: None,
            mixed: false,
            epochs: epochs.fine_tune,
            init_from: Some(i - 1),
            kd: t.kd,
            teacher: t.kd.map(|_| i - 1),
            early_stopping: false,
        });
    }
    StagePlan {
        notation: format_notation(spec),
        stages,
    }
}

/// Dataset locations a manifest refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub lidar: PathBuf,
    pub radar: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for ManifestPaths {
    fn default() -> Self {
        Self {
            lidar: "data/lidar".into(),
            radar: "data/radar".into(),
            work_dir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStage {
    #[serde(flatten)]
    pub stage: Stage,
    /// Directory holding the stage's training clouds once `commands` ran.
    pub dataset: PathBuf,
    /// Command lines materializing the dataset, in order.
    pub commands: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitEdge {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub notation: String,
    pub seed: u64,
    pub stages: Vec<ManifestStage>,
    pub init_edges: Vec<InitEdge>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const PROGRAM: &str = "radarlift";

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Describe how to materialize every stage's dataset.
///
/// All stages share one seed, so thinned clouds of successive stages are
/// nested subsets of each other.
pub fn emit_manifest(plan: &StagePlan, paths: &ManifestPaths, seed: u64) -> Manifest {
    let base = |cmd: &str| {
        vec![
            PROGRAM.to_string(),
            "--seed".into(),
            seed.to_string(),
            cmd.to_string(),
        ]
    };
    let stages = plan
        .stages
        .iter()
        .map(|st| {
            let dir = paths.work_dir.join(format!("stage_{}", st.index));
            let mut commands = Vec::new();
            let lidar = if st.data == DataMode::R || st.share == Share::ONE {
                paths.lidar.clone()
            } else {
                let out = dir.join("lidar");
                let kind = st
                    .thin_out
                    .expect("validated: thinned stages name a method");
                let mut c = base("thin-out");
                c.extend([
                    "--input".into(),
                    path_arg(&paths.lidar),
                    "--output".into(),
                    path_arg(&out),
                    "--method".into(),
                    kind.cli_name().into(),
                    "--share".into(),
                    st.share.to_string(),
                ]);
                if kind == ThinOutKind::Knn {
                    c.extend(["--radar".into(), path_arg(&paths.radar)]);
                }
                commands.push(c);
                out
            };
            let dataset = match st.data {
                DataMode::R => paths.radar.clone(),
                DataMode::L => lidar,
                DataMode::RL => {
                    let out = dir.join("mixed");
                    let mut c = base("mix");
                    c.extend([
                        "--radar".into(),
                        path_arg(&paths.radar),
                        "--lidar".into(),
                        path_arg(&lidar),
                        "--output".into(),
                        path_arg(&out),
                    ]);
                    commands.push(c);
                    out
                }
            };
            ManifestStage {
                stage: st.clone(),
                dataset,
                commands,
            }
        })
        .collect();
    let init_edges = plan
        .stages
        .iter()
        .filter_map(|s| s.init_from.map(|from| InitEdge { from, to: s.index }))
        .collect();
    Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        notation: plan.notation.clone(),
        seed,
        stages,
        init_edges,
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}
