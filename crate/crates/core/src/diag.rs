//! Measured quantities of a run: consensus errors of variables and
//! trackers, gradient-estimation errors, surrogate gradient norms, losses,
//! and accuracy, plus the CSV sink that persists them.
//!
//! Surrogate norms are reported raw; any `1/δ` weighting is applied at plot
//! time so records from different `δ` settings stay comparable.

use std::io::{self, Write};

use thiserror::Error;

use crate::linalg::{axpy, mean_vector, norm, sub};
use crate::optim::WorkerState;
use crate::problem::{global_full_gradient, BilevelProblem, GradientStream};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: expected header `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-iteration diagnostics. Entries that are only computed on a cadence
/// (losses, gradient errors, surrogates) are absent in between.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub t: usize,
    pub upper_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub consensus_x: f64,
    pub consensus_y: f64,
    pub consensus_z: f64,
    pub consensus_p: f64,
    pub consensus_q: f64,
    pub consensus_r: f64,
    pub grad_err_f1: Option<f64>,
    pub grad_err_g1y: Option<f64>,
    pub grad_err_g1z: Option<f64>,
    pub grad_err_f2: Option<f64>,
    pub grad_err_g2y: Option<f64>,
    pub grad_err_g2z: Option<f64>,
    pub surrogate_h: Option<f64>,
    pub surrogate_gz: Option<f64>,
    /// `‖∇Φ(x̄)‖`; present only where the problem has a closed form.
    pub hypergrad_exact: Option<f64>,
}

impl MetricsRecord {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            upper_loss: None,
            test_accuracy: None,
            consensus_x: 0.0,
            consensus_y: 0.0,
            consensus_z: 0.0,
            consensus_p: 0.0,
            consensus_q: 0.0,
            consensus_r: 0.0,
            grad_err_f1: None,
            grad_err_g1y: None,
            grad_err_g1z: None,
            grad_err_f2: None,
            grad_err_g2y: None,
            grad_err_g2z: None,
            surrogate_h: None,
            surrogate_gz: None,
            hypergrad_exact: None,
        }
    }

    pub fn set_gradient_error(&mut self, stream: EstimatorStream, value: f64) {
        match stream {
            EstimatorStream::F1 => self.grad_err_f1 = Some(value),
            EstimatorStream::G1Y => self.grad_err_g1y = Some(value),
            EstimatorStream::G1Z => self.grad_err_g1z = Some(value),
            EstimatorStream::F2 => self.grad_err_f2 = Some(value),
            EstimatorStream::G2Y => self.grad_err_g2y = Some(value),
            EstimatorStream::G2Z => self.grad_err_g2z = Some(value),
        }
    }

    /// One CSV row in schema order, absent entries as empty cells, floats
    /// formatted to 17 significant digits (exact round trip).
    pub fn to_csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let num = |v: f64| format!("{v:.16e}");
        [
            self.t.to_string(),
            cell(self.upper_loss),
            cell(self.test_accuracy),
            num(self.consensus_x),
            num(self.consensus_y),
            num(self.consensus_z),
            num(self.consensus_p),
            num(self.consensus_q),
            num(self.consensus_r),
            cell(self.grad_err_f1),
            cell(self.grad_err_g1y),
            cell(self.grad_err_g1z),
            cell(self.grad_err_f2),
            cell(self.grad_err_g2y),
            cell(self.grad_err_g2z),
            cell(self.surrogate_h),
            cell(self.surrogate_gz),
            cell(self.hypergrad_exact),
        ]
        .join(",")
    }
}

/// Fixed column order of schema v1.
pub const SCHEMA_COLUMNS: [&str; 18] = [
    "t",
    "upper_loss",
    "test_accuracy",
    "consensus_x",
    "consensus_y",
    "consensus_z",
    "consensus_p",
    "consensus_q",
    "consensus_r",
    "grad_err_f1",
    "grad_err_g1y",
    "grad_err_g1z",
    "grad_err_f2",
    "grad_err_g2y",
    "grad_err_g2z",
    "surrogate_h",
    "surrogate_gz",
    "hypergrad_exact",
];

/// The single header line carrying the schema tag and the column order.
pub fn schema_header() -> String {
    format!("#schema v1 {}", SCHEMA_COLUMNS.join(","))
}

/// Append-only CSV writer: one header line, then one line per record.
pub struct CsvSink<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, header_written: false }
    }

    pub fn emit(&mut self, record: &MetricsRecord) -> io::Result<()> {
        if !self.header_written {
            writeln!(self.out, "{}", schema_header())?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", record.to_csv_row())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses schema-v1 CSV text back into records.
pub fn parse_records(text: &str) -> Result<Vec<MetricsRecord>, DiagError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DiagError::Parse { line: 1, message: "empty file".into() })?;
    let expected = schema_header();
    if header != expected {
        return Err(DiagError::SchemaMismatch { expected, found: header.to_string() });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != SCHEMA_COLUMNS.len() {
            return Err(DiagError::Parse {
                line: line_no,
                message: format!("expected {} cells, found {}", SCHEMA_COLUMNS.len(), cells.len()),
            });
        }
        let parse_req = |cell: &str, name: &str| -> Result<f64, DiagError> {
            cell.parse().map_err(|_| DiagError::Parse {
                line: line_no,
                message: format!("column {name}: `{cell}` is not a number"),
            })
        };
        let parse_opt = |cell: &str, name: &str| -> Result<Option<f64>, DiagError> {
            if cell.is_empty() {
                Ok(None)
            } else {
                parse_req(cell, name).map(Some)
            }
        };
        let record = MetricsRecord {
            t: cells[0].parse().map_err(|_| DiagError::Parse {
                line: line_no,
                message: format!("column t: `{}` is not an integer", cells[0]),
            })?,
            upper_loss: parse_opt(cells[1], "upper_loss")?,
            test_accuracy: parse_opt(cells[2], "test_accuracy")?,
            consensus_x: parse_req(cells[3], "consensus_x")?,
            consensus_y: parse_req(cells[4], "consensus_y")?,
            consensus_z: parse_req(cells[5], "consensus_z")?,
            consensus_p: parse_req(cells[6], "consensus_p")?,
            consensus_q: parse_req(cells[7], "consensus_q")?,
            consensus_r: parse_req(cells[8], "consensus_r")?,
            grad_err_f1: parse_opt(cells[9], "grad_err_f1")?,
            grad_err_g1y: parse_opt(cells[10], "grad_err_g1y")?,
            grad_err_g1z: parse_opt(cells[11], "grad_err_g1z")?,
            grad_err_f2: parse_opt(cells[12], "grad_err_f2")?,
            grad_err_g2y: parse_opt(cells[13], "grad_err_g2y")?,
            grad_err_g2z: parse_opt(cells[14], "grad_err_g2z")?,
            surrogate_h: parse_opt(cells[15], "surrogate_h")?,
            surrogate_gz: parse_opt(cells[16], "surrogate_gz")?,
            hypergrad_exact: parse_opt(cells[17], "hypergrad_exact")?,
        };
        records.push(record);
    }
    Ok(records)
}

/// Mean Euclidean distance of per-worker vectors from their mean,
/// `(1/K) Σ_k ‖v_k − v̄‖`.
pub fn consensus_error<V: AsRef<[f64]>>(vectors: &[V]) -> f64 {
    assert!(!vectors.is_empty(), "consensus of an empty worker list");
    let mean = mean_vector(vectors);
    vectors.iter().map(|v| norm(&sub(v.as_ref(), &mean))).sum::<f64>() / vectors.len() as f64
}

/// One of the six estimator streams paired with its exact gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorStream {
    /// `u₁` vs `∇₁f(x_k, y_k)`
    F1,
    /// `u₂` vs `∇₁g(x_k, y_k)`
    G1Y,
    /// `u₃` vs `∇₁g(x_k, z_k)`
    G1Z,
    /// `v₁` vs `∇₂f(x_k, y_k)`
    F2,
    /// `v₂` vs `∇₂g(x_k, y_k)`
    G2Y,
    /// `w₁` vs `∇₂g(x_k, z_k)`
    G2Z,
}

impl EstimatorStream {
    pub const ALL: [EstimatorStream; 6] = [
        EstimatorStream::F1,
        EstimatorStream::G1Y,
        EstimatorStream::G1Z,
        EstimatorStream::F2,
        EstimatorStream::G2Y,
        EstimatorStream::G2Z,
    ];
}

/// `‖(1/K) Σ_k est_k − (1/K) Σ_k ∇(worker k's own point)‖` for one stream,
/// with full-batch gradients on the exact side.
pub fn gradient_error(problem: &dyn BilevelProblem, states: &[WorkerState], stream: EstimatorStream) -> f64 {
    assert!(!states.is_empty());
    let dim = match stream {
        EstimatorStream::F1 | EstimatorStream::G1Y | EstimatorStream::G1Z => problem.dim_x(),
        _ => problem.dim_y(),
    };
    let mut est_mean = vec![0.0; dim];
    let mut full_mean = vec![0.0; dim];
    for (k, st) in states.iter().enumerate() {
        let (est, full): (&[f64], Vec<f64>) = match stream {
            EstimatorStream::F1 => (&st.u1, problem.full_grad1_f(k, &st.x, &st.y)),
            EstimatorStream::G1Y => (&st.u2, problem.full_grad1_g(k, &st.x, &st.y)),
            EstimatorStream::G1Z => (&st.u3, problem.full_grad1_g(k, &st.x, &st.z)),
            EstimatorStream::F2 => (&st.v1, problem.full_grad2_f(k, &st.x, &st.y)),
            EstimatorStream::G2Y => (&st.v2, problem.full_grad2_g(k, &st.x, &st.y)),
            EstimatorStream::G2Z => (&st.w1, problem.full_grad2_g(k, &st.x, &st.z)),
        };
        axpy(&mut est_mean, 1.0, est);
        axpy(&mut full_mean, 1.0, &full);
    }
    let inv = 1.0 / states.len() as f64;
    for (e, f) in est_mean.iter_mut().zip(full_mean.iter_mut()) {
        *e *= inv;
        *f *= inv;
    }
    norm(&sub(&est_mean, &full_mean))
}

/// Full-batch surrogate gradient norms at the averaged iterates:
/// `‖∇₂h_δ(x̄,ȳ)‖` with `∇₂h_δ = δ·∇₂f + ∇₂g`, and `‖∇₂g(x̄,z̄)‖`.
pub fn surrogate_norms(
    problem: &dyn BilevelProblem,
    mean_x: &[f64],
    mean_y: &[f64],
    mean_z: &[f64],
    delta: f64,
) -> (f64, f64) {
    let grad2_f = global_full_gradient(problem, mean_x, mean_y, GradientStream::F2);
    let grad2_g = global_full_gradient(problem, mean_x, mean_y, GradientStream::G2);
    let h: Vec<f64> = grad2_f.iter().zip(&grad2_g).map(|(f, g)| delta * f + g).collect();
    let gz = global_full_gradient(problem, mean_x, mean_z, GradientStream::G2);
    (norm(&h), norm(&gz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSpec;
    use crate::problem::QuadraticBilevel;

    #[test]
    fn consensus_trivial_cases() {
        assert_eq!(consensus_error(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
        assert_eq!(consensus_error(&[vec![1.0], vec![-1.0]]), 1.0);
        let e = consensus_error(&[vec![0.0], vec![1.0], vec![2.0]]);
        assert!((e - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn consensus_translation_and_scaling() {
        let base = [vec![0.5, 1.0], vec![-0.5, 2.0], vec![3.0, -1.0]];
        let e0 = consensus_error(&base);
        let shifted: Vec<Vec<f64>> = base.iter().map(|v| vec![v[0] + 10.0, v[1] - 4.0]).collect();
        assert!((consensus_error(&shifted) - e0).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> = base.iter().map(|v| vec![v[0] * 3.0, v[1] * 3.0]).collect();
        assert!((consensus_error(&scaled) - 3.0 * e0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_norm_assembly() {
        let q = QuadraticBilevel::random(3, 2, 2, 1.0, 0.5, 3, NoiseSpec::None);
        let x = vec![0.4, -0.2, 0.9];
        let y = vec![1.0, -1.0];
        let z = vec![0.2, 0.3];
        let delta = 0.7;
        let (h, gz) = surrogate_norms(&q, &x, &y, &z, delta);
        let f2 = global_full_gradient(&q, &x, &y, GradientStream::F2);
        let g2 = global_full_gradient(&q, &x, &y, GradientStream::G2);
        let manual: Vec<f64> = f2.iter().zip(&g2).map(|(f, g)| delta * f + g).collect();
        assert!((h - norm(&manual)).abs() < 1e-12);
        let g2z = global_full_gradient(&q, &x, &z, GradientStream::G2);
        assert!((gz - norm(&g2z)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_vanishes_at_lower_optimum_with_small_delta() {
        let q = QuadraticBilevel::random(3, 2, 2, 1.0, 0.5, 4, NoiseSpec::None);
        let x = vec![0.1, 0.1, -0.3];
        let y = q.y_star(&x);
        for delta in [1e-3, 1e-6] {
            let (h, _) = surrogate_norms(&q, &x, &y, &y, delta);
            let f2 = global_full_gradient(&q, &x, &y, GradientStream::F2);
            assert!((h - delta * norm(&f2)).abs() < 1e-12, "residual part should vanish at y*");
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut sink = CsvSink::new(Vec::new());
        let mut records = Vec::new();
        for t in 0..100 {
            let mut r = MetricsRecord::new(t);
            r.consensus_x = 0.1 * t as f64 + 1.0 / 3.0;
            r.consensus_p = (t as f64).sqrt();
            if t % 10 == 0 {
                r.upper_loss = Some(0.693_147_180_559_945_3 / (t + 1) as f64);
                r.test_accuracy = Some(0.5 + t as f64 / 1000.0);
                r.grad_err_f1 = Some(1e-17 * t as f64);
                r.surrogate_h = Some(2.0_f64.powi(-(t as i32)));
            }
            sink.emit(&r).unwrap();
            records.push(r);
        }
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 101, "header plus one line per emit");
        let parsed = parse_records(&text).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let text = "#schema v2 t\n1,2\n";
        assert!(matches!(parse_records(text), Err(DiagError::SchemaMismatch { .. })));
    }
}
