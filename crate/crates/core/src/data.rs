//! Procedural datasets, corruptions for shift evaluation, and CSV I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::bilinear_affine_warp;
use crate::distributions::NoiseSource;
use crate::error::{Error, Result};
use crate::model::Target;
use crate::tensor::Tensor;

pub const REGRESSION_X_RANGE: (f64, f64) = (-3.0, 3.0);
pub const REGRESSION_NOISE_STD: f64 = 0.2;
pub const REGRESSION_HETERO_STD: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Regression => f.write_str("regression"),
            Task::Classification { .. } => f.write_str("classification"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: Task,
    /// Shape of one input, e.g. `[1]` or `[16, 16]`.
    pub shape: Vec<usize>,
    /// `[N, prod(shape)]`, rasters flattened row-major.
    pub inputs: Tensor,
    /// Values for regression, class indices for classification.
    pub targets: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        task: Task,
        shape: Vec<usize>,
        inputs: Tensor,
        targets: Vec<f64>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if inputs.shape().len() != 2 || inputs.cols() != d {
            return Err(Error::Shape(format!(
                "inputs {:?} do not match example shape {:?}",
                inputs.shape(),
                shape
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if targets.len() != inputs.rows() {
            return Err(Error::Dimension {
                expected: inputs.rows(),
                got: targets.len(),
            });
        }
        if let Task::Classification { classes } = task {
            if let Some((i, y)) = targets
                .iter()
                .enumerate()
                .find(|(_, y)| !(y.fract() == 0.0 && **y >= 0.0 && **y < classes as f64))
            {
                return Err(Error::InvalidArgument(format!(
                    "label {y} at row {i} is not in [0, {classes})"
                )));
            }
        }
        Ok(Self {
            task,
            shape,
            inputs,
            targets,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.targets[i] as usize
    }

    pub fn target(&self, i: usize) -> Target {
        match self.task {
            Task::Regression => Target::Value(self.targets[i]),
            Task::Classification { .. } => Target::Class(self.label(i)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.metadata
            .get("seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Dataset::new(
            self.task,
            self.shape.clone(),
            Tensor::matrix(indices.len(), d, data)?,
            targets,
            self.metadata.clone(),
        )
    }
}

fn metadata(generator: &str, seed: u64, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("generator".to_string(), generator.to_string());
    m.insert("seed".to_string(), seed.to_string());
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    m
}

/// Noiseless regression function `sin 2x + 0.5 cos 3x`.
pub fn regression_mean(x: f64) -> f64 {
    (2.0 * x).sin() + 0.5 * (3.0 * x).cos()
}

/// Variance of `y - regression_mean(x)`.
pub fn regression_noise_var(x: f64) -> f64 {
    REGRESSION_NOISE_STD.powi(2) + (REGRESSION_HETERO_STD * x.sin()).powi(2)
}

/// One noisy target at `x`.
pub fn regression_target(x: f64, stream: &mut crate::distributions::NoiseStream) -> f64 {
    let eps = REGRESSION_NOISE_STD * stream.standard_normal();
    let hetero = REGRESSION_HETERO_STD * stream.standard_normal();
    regression_mean(x) + eps + hetero * x.sin()
}

fn regression_split(n: usize, seed: u64, split: &str) -> Result<Dataset> {
    let mut stream = NoiseSource::new(seed).named(split).stream();
    let (lo, hi) = REGRESSION_X_RANGE;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = stream.uniform_range(lo, hi);
        xs.push(x);
        ys.push(regression_target(x, &mut stream));
    }
    let meta = metadata(
        "synthetic-regression",
        seed,
        &[("split", split.to_string())],
    );
    Dataset::new(Task::Regression, vec![1], Tensor::column(xs), ys, meta)
}

/// Train and test sets with `x ~ U[-3, 3]` and independent noise streams.
pub fn gen_synthetic_regression(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("counts must be at least 1".into()));
    }
    Ok((
        regression_split(n_train, seed, "train")?,
        regression_split(n_test, seed, "test")?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Bar,
    Cross,
    Ell,
    Diagonal,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Bar, Glyph::Cross, Glyph::Ell, Glyph::Diagonal];

    /// Strokes in unit coordinates, origin at the raster centre, `y` down.
    fn strokes(self) -> &'static [((f64, f64), (f64, f64))] {
        match self {
            Glyph::Bar => &[((0.0, -0.6), (0.0, 0.6))],
            Glyph::Cross => &[((0.0, -0.6), (0.0, 0.6)), ((-0.6, 0.0), (0.6, 0.0))],
            Glyph::Ell => &[((-0.35, -0.6), (-0.35, 0.5)), ((-0.35, 0.5), (0.45, 0.5))],
            Glyph::Diagonal => &[((-0.5, -0.5), (0.5, 0.5))],
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Anti-aliased raster of `glyph` rotated by `omega` and shifted by `shift`
/// (unit coordinates, where the raster spans `[-1, 1]`).
pub fn render_glyph(glyph: Glyph, size: usize, omega: f64, shift: (f64, f64)) -> Vec<f64> {
    let half_width = 0.12;
    let soft = 1.0 / size as f64;
    let centre = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = omega.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let u = (c as f64 - centre) / centre - shift.0;
            let v = (r as f64 - centre) / centre - shift.1;
            let p = (cos * u + sin * v, -sin * u + cos * v);
            let d = glyph
                .strokes()
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            out.push((1.0 - (d - half_width) / soft).clamp(0.0, 1.0));
        }
    }
    out
}

/// `n` glyph rasters with labels assigned round-robin. Each draw rotates by
/// up to `pose_jitter` radians and shifts by up to `pose_jitter / 4` of the
/// raster width in each direction.
pub fn gen_glyph_classification(
    n: usize,
    size: usize,
    n_classes: usize,
    pose_jitter: f64,
    seed: u64,
) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "raster size must be at least 8, got {size}"
        )));
    }
    if !(2..=Glyph::ALL.len()).contains(&n_classes) {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be in 2..=4, got {n_classes}"
        )));
    }
    if n == 0 || !(pose_jitter >= 0.0) {
        return Err(Error::InvalidArgument(
            "need n >= 1 and pose_jitter >= 0".into(),
        ));
    }
    let root = NoiseSource::new(seed).named("glyphs");
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        let mut s = root.child(i as u64).stream();
        let omega = s.uniform_range(-1.0, 1.0) * pose_jitter;
        let shift = (
            s.uniform_range(-1.0, 1.0) * pose_jitter / 2.0,
            s.uniform_range(-1.0, 1.0) * pose_jitter / 2.0,
        );
        data.extend(render_glyph(Glyph::ALL[label], size, omega, shift));
        labels.push(label as f64);
    }
    let meta = metadata(
        "glyphs",
        seed,
        &[
            ("size", size.to_string()),
            ("n_classes", n_classes.to_string()),
            ("pose_jitter", pose_jitter.to_string()),
        ],
    );
    Dataset::new(
        Task::Classification { classes: n_classes },
        vec![size, size],
        Tensor::matrix(n, size * size, data)?,
        labels,
        meta,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    GaussianNoise,
    ExtraRotation,
    MeanShift,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian-noise",
            Corruption::ExtraRotation => "extra-rotation",
            Corruption::MeanShift => "mean-shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" => Ok(Corruption::GaussianNoise),
            "extra-rotation" => Ok(Corruption::ExtraRotation),
            "mean-shift" => Ok(Corruption::MeanShift),
            other => Err(Error::InvalidArgument(format!(
                "unknown corruption `{other}`"
            ))),
        }
    }
}

/// Shifted copy of `data`: additive `N(0, severity^2)` pixel noise, rotation
/// of every raster by `severity` radians, or `+severity` on every input.
pub fn corrupt_dataset(data: &Dataset, kind: Corruption, severity: f64) -> Result<Dataset> {
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "severity must be finite and >= 0, got {severity}"
        )));
    }
    let mut out = data.clone();
    out.metadata.insert("corruption".into(), kind.name().into());
    out.metadata.insert("severity".into(), severity.to_string());
    if severity == 0.0 {
        return Ok(out);
    }
    match kind {
        Corruption::GaussianNoise => {
            let mut s = NoiseSource::new(data.seed())
                .named(kind.name())
                .child(severity.to_bits())
                .stream();
            for v in out.inputs.data_mut() {
                *v += severity * s.standard_normal();
            }
        }
        Corruption::MeanShift => {
            for v in out.inputs.data_mut() {
                *v += severity;
            }
        }
        Corruption::ExtraRotation => {
            let [h, w] = data.shape[..] else {
                return Err(Error::InvalidArgument(
                    "extra-rotation needs raster inputs".into(),
                ));
            };
            let d = h * w;
            let mut rotated = Vec::with_capacity(data.inputs.len());
            for i in 0..data.len() {
                let img = Tensor::matrix(h, w, data.row(i).to_vec())?;
                rotated.extend(bilinear_affine_warp(&img, severity, (0.0, 0.0)).into_data());
            }
            out.inputs = Tensor::matrix(data.len(), d, rotated)?;
        }
    }
    Ok(out)
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Writes a header comment, a column-name row, then one row per example with
/// 17 significant digits.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = format!(
        "# task={} shape={} seed={} generator={}",
        data.task,
        shape_string(&data.shape),
        data.seed(),
        data.metadata
            .get("generator")
            .map(String::as_str)
            .unwrap_or("unknown")
    );
    if let Task::Classification { classes } = data.task {
        text.push_str(&format!(" classes={classes}"));
    }
    for (k, v) in &data.metadata {
        if !matches!(k.as_str(), "seed" | "generator" | "classes") {
            text.push_str(&format!(" {k}={}", v.replace(' ', "_")));
        }
    }
    text.push('\n');
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(match data.task {
            Task::Regression => format!("{:.16e}", data.targets[i]),
            Task::Classification { .. } => data.label(i).to_string(),
        });
        w.write_record(&rec).map_err(csv_io)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    text.push_str(std::str::from_utf8(&body).expect("csv writes utf-8"));
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string())
}

/// Parses the CSV format written by [`write_csv`]; `origin` names the source
/// in error messages.
pub fn parse_csv(text: &str, origin: &str) -> Result<Dataset> {
    let fail = |line: usize, detail: String| Error::Parse {
        path: origin.to_string(),
        line,
        detail,
    };
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let first = first.trim_end_matches('\r');
    let fields = first
        .strip_prefix('#')
        .ok_or_else(|| fail(1, "expected a `# task=...` header line".into()))?;
    let mut meta = BTreeMap::new();
    for tok in fields.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| fail(1, format!("malformed header field `{tok}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| fail(1, format!("header is missing `{k}`")))
    };
    let shape: Vec<usize> = get("shape")?
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| fail(1, format!("bad shape dimension `{d}`")))
        })
        .collect::<Result<_>>()?;
    get("seed")?
        .parse::<u64>()
        .map_err(|_| fail(1, "seed is not an integer".into()))?;
    get("generator")?;
    let task = match get("task")?.as_str() {
        "regression" => Task::Regression,
        "classification" => {
            let classes = get("classes")?
                .parse()
                .map_err(|_| fail(1, "classes is not an integer".into()))?;
            Task::Classification { classes }
        }
        other => return Err(fail(1, format!("unknown task `{other}`"))),
    };
    for k in ["shape", "task", "classes"] {
        meta.remove(k);
    }
    let d: usize = shape.iter().product();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(rest.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| fail(2, e.to_string()))?
        .clone();
    if header.len() != d + 1 {
        return Err(fail(
            2,
            format!("expected {} columns, found {}", d + 1, header.len()),
        ));
    }
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize + 1).unwrap_or(0);
            fail(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize + 1).unwrap_or(0);
        if rec.len() != d + 1 {
            return Err(fail(
                line,
                format!("expected {} fields, found {}", d + 1, rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(line, format!("column {j}: `{field}` is not a number")))?;
            if j < d {
                data.push(v);
            } else {
                targets.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(fail(3, "no data rows".into()));
    }
    let n = targets.len();
    Dataset::new(task, shape, Tensor::matrix(n, d, data)?, targets, meta)
        .map_err(|e| fail(0, e.to_string()))
}
