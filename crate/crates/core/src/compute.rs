//! Training-compute estimates and the teacher/student scale law.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FLOPs in one unit of "×10⁹ TFLOPs".
pub const FLOPS_PER_E9_TFLOPS: f64 = 1e21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeEstimate {
    pub params: f64,
    pub tokens: f64,
    pub teacher_params: Option<f64>,
    /// `2·N·D`
    pub forward: f64,
    /// `4·N·D`
    pub backward: f64,
    /// `2·N_teacher·D`, zero without a teacher.
    pub teacher: f64,
    pub total: f64,
}

impl ComputeEstimate {
    pub fn e9_tflops(&self) -> f64 {
        self.total / FLOPS_PER_E9_TFLOPS
    }

    /// E.g. `84.0×10⁹ TFLOPs`.
    pub fn formatted(&self) -> String {
        format_e9_tflops(self.total)
    }
}

pub fn format_e9_tflops(flops: f64) -> String {
    format!("{:.1}×10⁹ TFLOPs", flops / FLOPS_PER_E9_TFLOPS)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `C = 6·N·D`.
pub fn training_compute(params: f64, tokens: f64) -> Result<ComputeEstimate> {
    positive("parameter count", params)?;
    positive("token count", tokens)?;
    let forward = 2.0 * params * tokens;
    let backward = 4.0 * params * tokens;
    Ok(ComputeEstimate { params, tokens, teacher_params: None, forward, backward, teacher: 0.0, total: forward + backward })
}

/// `C = 6·N_student·D + 2·N_teacher·D`.
pub fn distillation_compute(student_params: f64, teacher_params: f64, tokens: f64) -> Result<ComputeEstimate> {
    positive("teacher parameter count", teacher_params)?;
    let base = training_compute(student_params, tokens)?;
    let teacher = 2.0 * teacher_params * tokens;
    Ok(ComputeEstimate { teacher_params: Some(teacher_params), teacher, total: base.total + teacher, ..base })
}

/// One row of the published compute table: billions of parameters and
/// tokens, optional teacher size in billions, and the listed compute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComputeTableRow {
    pub model: &'static str,
    pub params_b: f64,
    pub tokens_b: f64,
    pub teacher_b: Option<f64>,
    pub reported_e9_tflops: f64,
}

impl ComputeTableRow {
    pub fn estimate(&self) -> Result<ComputeEstimate> {
        let (n, d) = (self.params_b * 1e9, self.tokens_b * 1e9);
        match self.teacher_b {
            Some(t) => distillation_compute(n, t * 1e9, d),
            None => training_compute(n, d),
        }
    }

    /// Whether the regenerated value rounds to the listed one decimal.
    pub fn reproduces(&self) -> Result<bool> {
        let got = format!("{:.1}", self.estimate()?.e9_tflops());
        Ok(got == format!("{:.1}", self.reported_e9_tflops))
    }
}

const fn row(model: &'static str, params_b: f64, tokens_b: f64, teacher_b: Option<f64>, reported: f64) -> ComputeTableRow {
    ComputeTableRow { model, params_b, tokens_b, teacher_b, reported_e9_tflops: reported }
}

/// Compute estimates of public small language models, as published.
pub const COMPUTE_TABLE: [ComputeTableRow; 23] = [
    row("LLaMA-7B", 7.0, 1000.0, None, 42.0),
    row("LLaMA2-7B", 7.0, 2000.0, None, 84.0),
    row("Baichuan-7B", 7.0, 1200.0, None, 50.4),
    row("Baichuan2-7B", 7.0, 2600.0, None, 109.2),
    row("Mistral-7B", 7.0, 4000.0, None, 168.0),
    row("ShearedLLaMA-2.7B", 2.7, 50.0, None, 0.8),
    row("CerebrasGPT-2.7B", 2.7, 53.0, None, 0.9),
    row("OPT-2.7B", 2.7, 180.0, None, 2.9),
    row("BLOOM-3B", 3.0, 341.0, None, 6.1),
    row("Pythia-2.8B", 2.8, 300.0, None, 5.0),
    row("OpenLLaMA-3B", 3.0, 1000.0, None, 18.0),
    row("OpenLLaMAv2-3B", 3.0, 1000.0, None, 18.0),
    row("BTLM-3B", 3.0, 627.0, None, 11.2),
    row("StableLM-3B", 3.0, 4000.0, None, 72.0),
    row("ShearedLLaMA-1.3B", 1.3, 50.0, None, 0.4),
    row("CerebrasGPT-1.3B", 1.3, 26.0, None, 0.2),
    row("OPT-1.3B", 1.3, 180.0, None, 1.0),
    row("BLOOM-1.1B", 1.1, 341.0, None, 2.3),
    row("Pythia-1.4B", 1.4, 300.0, None, 2.5),
    row("TinyLLaMA-1.1B", 1.3, 1000.0, None, 7.8),
    row("Falcon-1B", 1.0, 350.0, None, 2.1),
    // teacher taken as the mean of 20B and 175B
    row("Phi1.5-1.3B", 1.3, 150.0, Some(97.5), 30.4),
    row("MiniMA", 3.0, 126.0, Some(7.0), 4.0),
];

/// Optimal-teacher law: the best teacher for a student of scale `S` has
/// scale `S / (1 − p*)` where `p*` is the optimal pruning sparsity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawConfig {
    pub optimal_sparsity: f64,
}

impl Default for LawConfig {
    fn default() -> Self {
        LawConfig { optimal_sparsity: 0.6 }
    }
}

impl LawConfig {
    pub fn retained(&self) -> Result<f64> {
        let r = 1.0 - self.optimal_sparsity;
        if !(self.optimal_sparsity >= 0.0 && r > 0.0) {
            return Err(Error::Input(format!("optimal sparsity {} must lie in [0, 1)", self.optimal_sparsity)));
        }
        Ok(r)
    }

    pub fn optimal_teacher(&self, student: f64) -> Result<f64> {
        optimal_teacher_with(student, self.retained()?)
    }

    pub fn optimal_student(&self, teacher: f64) -> Result<f64> {
        optimal_student_with(teacher, self.retained()?)
    }
}

fn check_scale<F: Num + PartialOrd>(v: &F) -> Result<()> {
    if *v > F::zero() {
        Ok(())
    } else {
        Err(Error::Input("scale must be positive".into()))
    }
}

/// `teacher = student / retained`, in any numeric type (exact for rationals).
pub fn optimal_teacher_with<F: Num + PartialOrd + Copy>(student: F, retained: F) -> Result<F> {
    check_scale(&student)?;
    check_scale(&retained)?;
    Ok(student / retained)
}

/// `student = teacher · retained`.
pub fn optimal_student_with<F: Num + PartialOrd + Copy>(teacher: F, retained: F) -> Result<F> {
    check_scale(&teacher)?;
    check_scale(&retained)?;
    Ok(teacher * retained)
}

pub fn optimal_teacher(student: f64) -> Result<f64> {
    LawConfig::default().optimal_teacher(student)
}

pub fn optimal_student(teacher: f64) -> Result<f64> {
    LawConfig::default().optimal_student(teacher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn training_examples() {
        assert_eq!(training_compute(7e9, 2e12).unwrap().formatted(), "84.0×10⁹ TFLOPs");
        assert_eq!(training_compute(3e9, 4e12).unwrap().formatted(), "72.0×10⁹ TFLOPs");
        let unit = training_compute(1.0, 1.0).unwrap();
        assert_eq!((unit.forward, unit.backward, unit.total), (2.0, 4.0, 6.0));
        assert!(matches!(training_compute(1.0, 0.0), Err(Error::Input(_))));
        assert!(matches!(training_compute(-1.0, 5.0), Err(Error::Input(_))));
    }

    #[test]
    fn distillation_examples() {
        let m = distillation_compute(3e9, 7e9, 126e9).unwrap();
        assert!((m.total - 4.032e21).abs() / 4.032e21 < 1e-12);
        assert_eq!(m.formatted(), "4.0×10⁹ TFLOPs");
        assert_eq!(m.forward + m.backward + m.teacher, m.total);
        let p = distillation_compute(1.3e9, 97.5e9, 150e9).unwrap();
        assert_eq!(p.formatted(), "30.4×10⁹ TFLOPs");
        let tiny = distillation_compute(2e6, 1e-9, 5e6).unwrap();
        let plain = training_compute(2e6, 5e6).unwrap();
        assert!((tiny.total - plain.total).abs() / plain.total < 1e-12);
    }

    #[test]
    fn linear_in_params() {
        for k in [0.5, 2.0, 3.0, 10.0] {
            let a = training_compute(k * 1.7e8, 3e9).unwrap().total;
            let b = k * training_compute(1.7e8, 3e9).unwrap().total;
            assert!((a - b).abs() / b < 1e-15);
        }
    }

    #[test]
    fn law_examples() {
        assert_eq!(optimal_teacher(3e9).unwrap(), 7.5e9);
        assert_eq!(optimal_student(7e9).unwrap(), 2.8e9);
        assert!(matches!(optimal_teacher(0.0), Err(Error::Input(_))));
        assert!(matches!(LawConfig { optimal_sparsity: 1.0 }.optimal_teacher(1.0), Err(Error::Input(_))));
    }

    #[test]
    fn law_inverse_is_exact_over_rationals() {
        let r = Ratio::new(2i64, 5);
        for s in [1i64, 3, 7, 1_000_000_007] {
            let s = Ratio::from_integer(s);
            let t = optimal_teacher_with(s, r).unwrap();
            assert_eq!(optimal_student_with(t, r).unwrap(), s);
        }
    }

    #[test]
    fn law_inverse_within_one_ulp_in_f64() {
        for s in [1.0, 3e9, 1.23e7, 8.5e10, 42.0] {
            let back = optimal_student(optimal_teacher(s).unwrap()).unwrap();
            assert!((back - s).abs() <= f64::EPSILON * s);
        }
    }

    #[test]
    fn compute_table_headline_rows() {
        let find = |name: &str| COMPUTE_TABLE.iter().find(|r| r.model == name).unwrap();
        for name in ["LLaMA2-7B", "MiniMA", "Phi1.5-1.3B", "CerebrasGPT-2.7B", "StableLM-3B"] {
            assert!(find(name).reproduces().unwrap(), "{name}");
        }
    }
}
