//! Activation correlation matrices and their block structure.
//!
//! Features are indexed `position · n_channels + channel`, so each position
//! owns one contiguous `n_channels × n_channels` diagonal block.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{LabError, Result};
use crate::model::TransformerModel;
use crate::task::{AdditionSample, SEQUENCE_LEN};
use crate::tensor::{gemm, Tensor};

/// Where activations are read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Tap {
    /// Residual-stream value leaving the block.
    #[default]
    BlockOutput,
    /// The same value after the layer norm that consumes it next.
    Normalized,
}

/// Which sequence positions contribute features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Positions {
    /// Every position the model reads during training (`$`, prompt, answer
    /// digits except the last).
    #[default]
    Full,
    /// `$` and the prompt only.
    Prompt,
}

impl Positions {
    pub fn count(self) -> usize {
        match self {
            Positions::Full => SEQUENCE_LEN - 1,
            Positions::Prompt => 1 + crate::task::PROMPT_LEN,
        }
    }
}

/// Activations `[n_samples × n_positions × n_channels]`, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTable {
    pub layer: usize,
    pub n_samples: usize,
    pub n_positions: usize,
    pub n_channels: usize,
    pub data: Vec<f64>,
}

impl ActivationTable {
    pub fn n_features(&self) -> usize {
        self.n_positions * self.n_channels
    }

    /// Features of one sample, flattened position-major.
    pub fn sample(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.data[i * f..(i + 1) * f]
    }
}

const COLLECT_CHUNK: usize = 250;

/// Runs every sample through the model and records the activations of block
/// `layer` (1-based) at the chosen tap and positions.
pub fn collect_activations(
    model: &TransformerModel,
    samples: &[AdditionSample],
    layer: usize,
    tap: Tap,
    positions: Positions,
) -> Result<ActivationTable> {
    let n_layers = model.config.n_layers;
    if layer == 0 || layer > n_layers {
        return Err(LabError::Contract(format!(
            "layer must lie in 1..={n_layers}, got {layer}"
        )));
    }
    let seq = positions.count();
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(samples.len() * seq * d);
    for chunk in samples.chunks(COLLECT_CHUNK) {
        let ids: Vec<usize> = chunk
            .iter()
            .flat_map(|s| s.sequence()[..seq].to_vec())
            .collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &ids, chunk.len(), seq, false)?;
        let var = match tap {
            Tap::BlockOutput => pass.block_outputs[layer - 1],
            Tap::Normalized => pass.normalized_outputs[layer - 1],
        };
        data.extend_from_slice(tape.value(var).data());
    }
    Ok(ActivationTable {
        layer,
        n_samples: samples.len(),
        n_positions: seq,
        n_channels: d,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub layer: usize,
    pub n_positions: usize,
    pub n_channels: usize,
    /// `[F × F]` with `F = n_positions · n_channels`.
    pub matrix: Tensor,
}

impl CorrelationMatrix {
    pub fn n_features(&self) -> usize {
        self.n_positions * self.n_channels
    }

    pub fn abs_view(&self) -> Tensor {
        let data = self.matrix.data().iter().map(|v| v.abs()).collect();
        Tensor::new(self.matrix.shape(), data).expect("same shape")
    }
}

/// Treats a feature as constant when its spread is at rounding level
/// relative to its magnitude.
fn is_constant(min: f64, max: f64) -> bool {
    max - min <= 1e-12 * min.abs().max(max.abs())
}

/// Pearson correlation across samples between every pair of features.
/// Constant features correlate 0 with everything, themselves included.
pub fn correlation_matrix(acts: &ActivationTable) -> Result<CorrelationMatrix> {
    let n = acts.n_samples;
    if n < 2 {
        return Err(LabError::Contract(format!(
            "correlation needs at least 2 samples, got {n}"
        )));
    }
    let f = acts.n_features();
    let mut z = acts.data.clone();
    let mut constant = vec![false; f];
    for j in 0..f {
        let column = || (0..n).map(|i| acts.data[i * f + j]);
        let mean = column().sum::<f64>() / n as f64;
        let (lo, hi) = column().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let ss: f64 = column().map(|v| (v - mean) * (v - mean)).sum();
        constant[j] = is_constant(lo, hi) || ss == 0.0;
        let scale = if constant[j] { 0.0 } else { 1.0 / ss.sqrt() };
        for i in 0..n {
            z[i * f + j] = (acts.data[i * f + j] - mean) * scale;
        }
    }
    let mut c = vec![0.0; f * f];
    // c = zᵀ z with z stored n × f
    gemm(f, n, f, &z, true, &z, false, &mut c, 0.0);
    for i in 0..f {
        for j in i..f {
            let v = if i == j {
                if constant[i] {
                    0.0
                } else {
                    1.0
                }
            } else {
                c[i * f + j].clamp(-1.0, 1.0)
            };
            c[i * f + j] = v;
            c[j * f + i] = v;
        }
    }
    Ok(CorrelationMatrix {
        layer: acts.layer,
        n_positions: acts.n_positions,
        n_channels: acts.n_channels,
        matrix: Tensor::new(&[f, f], c)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockStructureMetric {
    /// Σ|c_ij| over `i ≠ j` at the same position.
    pub on_block_mass: f64,
    /// Σ|c_ij| over pairs at different positions.
    pub off_block_mass: f64,
    /// `off / (on + off)`, 0 when both masses vanish.
    pub ratio: f64,
}

pub fn block_structure(m: &CorrelationMatrix) -> BlockStructureMetric {
    let f = m.n_features();
    let c = m.n_channels;
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..f {
        let row = m.matrix.row(i);
        for (j, v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if i / c == j / c {
                on += v.abs();
            } else {
                off += v.abs();
            }
        }
    }
    let total = on + off;
    BlockStructureMetric {
        on_block_mass: on,
        off_block_mass: off,
        ratio: if total > 0.0 { off / total } else { 0.0 },
    }
}

/// Binary P5 graymap, one pixel per entry, `|c|` mapped 0 → black, 1 → white.
pub fn render_heatmap(m: &CorrelationMatrix, path: &Path) -> Result<()> {
    let f = m.n_features();
    let mut bytes = format!("P5\n{f} {f}\n255\n").into_bytes();
    bytes.extend(
        m.matrix
            .data()
            .iter()
            .map(|v| (v.abs().min(1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Feature label `p<position>c<channel>`.
pub fn feature_label(index: usize, n_channels: usize) -> String {
    format!("p{}c{}", index / n_channels, index % n_channels)
}

/// Signed values with 17 significant digits, CRLF line ends, optional
/// header row of feature labels.
pub fn write_csv(m: &CorrelationMatrix, path: &Path, header: bool) -> Result<()> {
    let f = m.n_features();
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut line = String::new();
    let emit = |line: &mut String, out: &mut std::io::BufWriter<std::fs::File>| {
        line.push_str("\r\n");
        let r = out.write_all(line.as_bytes());
        line.clear();
        r
    };
    if header {
        let labels: Vec<String> = (0..f).map(|i| feature_label(i, m.n_channels)).collect();
        line.push_str(&labels.join(","));
        emit(&mut line, &mut out).map_err(|e| LabError::io(path, e))?;
    }
    for i in 0..f {
        for (j, v) in m.matrix.row(i).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            write!(line, "{v:.16e}").expect("writing to a String");
        }
        emit(&mut line, &mut out).map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

/// Reads a square matrix written by [`write_csv`]; a header row is detected
/// and skipped.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        if line.starts_with('p') {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| LabError::Contract(format!("bad CSV value {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let f = rows.len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(LabError::Shape(format!(
            "CSV in {} is not square",
            path.display()
        )));
    }
    Tensor::new(&[f, f], rows.concat())
}
