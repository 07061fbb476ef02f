//! Central finite-difference verification of tape gradients.

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Finite-difference checker. `fault` builds the analytic tape with a broken
/// backward rule for that op.
#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    pub h: f64,
    pub fault: Option<OpKind>,
}

impl GradChecker {
    pub fn new(h: f64) -> Self {
        GradChecker { h, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    fn tape(&self) -> Tape {
        match self.fault {
            Some(k) => Tape::with_fault(k),
            None => Tape::new(),
        }
    }

    /// Worst relative error over every coordinate of `x`.
    pub fn check<F>(&self, f: F, x: &Tensor) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let all: Vec<usize> = (0..x.len()).collect();
        self.check_coords(f, x, &all)
    }

    /// Worst relative error over the listed coordinates of `x`.
    pub fn check_coords<F>(&self, f: F, x: &Tensor, coords: &[usize]) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        if !(self.h > 0.0) {
            return Err(Error::Contract(format!("step h = {} must be positive", self.h)));
        }
        let eval = |point: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let v = tape.constant(point.clone());
            let out = f(&mut tape, v)?;
            scalar_of(&tape, out)
        };
        let base = eval(x)?;
        if base.to_bits() != eval(x)?.to_bits() {
            return Err(Error::Contract(
                "function is not deterministic; disable stochastic ops before checking".into(),
            ));
        }

        let mut tape = self.tape();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?;
        let zeros = vec![0.0; x.len()];
        let analytic = tape.grad(v).unwrap_or(&zeros).to_vec();

        let mut worst = 0.0f64;
        let mut probe = x.clone();
        for &i in coords {
            if i >= x.len() {
                return Err(Error::Contract(format!("coordinate {i} outside {} entries", x.len())));
            }
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + self.h;
            let plus = eval(&probe)?;
            probe.data_mut()[i] = orig - self.h;
            let minus = eval(&probe)?;
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * self.h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        Ok(worst)
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "checked function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradChecker::new(h).check(f, x)
}

/// One primitive's check.
#[derive(Debug, Clone, Copy)]
pub struct OpCheck {
    pub op: OpKind,
    /// Which argument was perturbed, for ops checked more than once.
    pub arg: &'static str,
    pub max_rel_error: f64,
}

/// Weighted reduction `Σ y ⊙ w` with fixed pseudo-random `w`, so every
/// output entry carries a distinct nonzero upstream gradient.
fn reduce(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(Tensor::randn(t.shape(y), 1.0, seed ^ 0x77));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type CheckFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Finite-difference checks of every differentiable primitive on inputs
/// drawn from `seed`. Reductions use `mul` and `sum`, so a fault in either
/// shows up in every row.
pub fn primitive_checks(seed: u64, h: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let checker = GradChecker::new(h).with_fault(fault);
    let c45 = Tensor::randn(&[4, 5], 1.0, seed ^ 1);
    let c54 = Tensor::randn(&[5, 4], 1.0, seed ^ 2);
    let c34 = Tensor::randn(&[3, 4], 1.0, seed ^ 3);
    let row4 = Tensor::randn(&[4], 1.0, seed ^ 4);
    let gain = Tensor::randn(&[4], 1.0, seed ^ 5);
    let x34 = Tensor::randn(&[3, 4], 1.0, seed ^ 6);
    let sq = Tensor::randn(&[4, 4], 1.0, seed ^ 7);
    let s1 = Tensor::randn(&[1], 1.0, seed ^ 8);
    let table = Tensor::randn(&[6, 4], 1.0, seed ^ 9);
    let drop_seed = seed ^ 10;

    let mut cases: Vec<(OpKind, &'static str, Tensor, CheckFn)> = Vec::new();
    let r = seed;
    {
        let c = c45.clone();
        cases.push((
            OpKind::Matmul,
            "lhs",
            x34.clone(),
            Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = t.matmul(x, cv)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let a = c34.clone();
        cases.push((
            OpKind::Matmul,
            "rhs",
            c45.clone(),
            Box::new(move |t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul(av, x)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let c = c54.clone();
        cases.push((
            OpKind::MatmulNt,
            "lhs",
            x34.clone(),
            Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = t.matmul_nt(x, cv)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let a = c34.clone();
        cases.push((
            OpKind::MatmulNt,
            "rhs",
            c54.clone(),
            Box::new(move |t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul_nt(av, x)?;
                reduce(t, y, r)
            }),
        ));
    }
    cases.push((
        OpKind::Add,
        "both",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.add(x, x)?;
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::Mul,
        "both",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.mul(x, x)?;
            reduce(t, y, r)
        }),
    ));
    {
        let v = row4.clone();
        cases.push((
            OpKind::AddRow,
            "matrix",
            x34.clone(),
            Box::new(move |t, x| {
                let vv = t.constant(v.clone());
                let y = t.add_row(x, vv)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let m = c34.clone();
        cases.push((
            OpKind::AddRow,
            "row",
            row4.clone(),
            Box::new(move |t, x| {
                let mv = t.constant(m.clone());
                let y = t.add_row(mv, x)?;
                reduce(t, y, r)
            }),
        ));
    }
    cases.push((
        OpKind::Scale,
        "x",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.scale(x, -0.7);
            reduce(t, y, r)
        }),
    ));
    {
        let s = s1.clone();
        cases.push((
            OpKind::MulScalar,
            "x",
            x34.clone(),
            Box::new(move |t, x| {
                let sv = t.constant(s.clone());
                let y = t.mul_scalar(x, sv)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let m = c34.clone();
        cases.push((
            OpKind::MulScalar,
            "scalar",
            s1.clone(),
            Box::new(move |t, x| {
                let mv = t.constant(m.clone());
                let y = t.mul_scalar(mv, x)?;
                reduce(t, y, r)
            }),
        ));
    }
    cases.push((
        OpKind::Tanh,
        "x",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.tanh(x);
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::Silu,
        "x",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.silu(x);
            reduce(t, y, r)
        }),
    ));
    {
        let m = c34.clone();
        cases.push((
            OpKind::Concat,
            "parts",
            x34.clone(),
            Box::new(move |t, x| {
                let mv = t.constant(m.clone());
                let y = t.concat(&[x, mv, x])?;
                reduce(t, y, r)
            }),
        ));
    }
    cases.push((
        OpKind::Slice,
        "x",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.slice(x, 1, 2)?;
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::Softmax,
        "full",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.softmax_rows(x, false)?;
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::Softmax,
        "causal",
        sq.clone(),
        Box::new(move |t, x| {
            let y = t.softmax_rows(x, true)?;
            reduce(t, y, r)
        }),
    ));
    {
        let g = gain.clone();
        cases.push((
            OpKind::RmsNorm,
            "x",
            x34.clone(),
            Box::new(move |t, x| {
                let gv = t.constant(g.clone());
                let y = t.rms_norm(x, gv)?;
                reduce(t, y, r)
            }),
        ));
    }
    {
        let m = c34.clone();
        cases.push((
            OpKind::RmsNorm,
            "gain",
            gain.clone(),
            Box::new(move |t, x| {
                let mv = t.constant(m.clone());
                let y = t.rms_norm(mv, x)?;
                reduce(t, y, r)
            }),
        ));
    }
    cases.push((
        OpKind::Dropout,
        "x",
        x34.clone(),
        Box::new(move |t, x| {
            let y = t.dropout(x, 0.75, drop_seed)?;
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::Embedding,
        "table",
        table,
        Box::new(move |t, x| {
            let y = t.embedding(x, &[2, 0, 5, 2, 3])?;
            reduce(t, y, r)
        }),
    ));
    cases.push((
        OpKind::CrossEntropy,
        "logits",
        x34.clone(),
        Box::new(move |t, x| t.cross_entropy(x, &[Some(1), None, Some(3)])),
    ));
    cases.push((OpKind::Sum, "x", x34, Box::new(move |t, x| Ok(t.sum(x)))));

    cases
        .into_iter()
        .map(|(op, arg, x, f)| {
            let max_rel_error = checker.check(|t, v| f(t, v), &x)?;
            Ok(OpCheck { op, arg, max_rel_error })
        })
        .collect()
}
