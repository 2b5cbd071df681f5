//! Dual-number arithmetic whose components are tape nodes.
//!
//! Building a network forward pass in [`Dual`] arithmetic records both the
//! value and its derivative with respect to a designated scalar (time, here)
//! as ordinary graph nodes. A later reverse sweep therefore differentiates
//! through the tangent as well — that is how weight gradients of a physics
//! residual containing d/dt terms are obtained.
//!
//! Only smooth operations get dual variants. Tangent terms that are
//! identically zero (constants, weights) are collapsed at build time using
//! the tape's interned zero, so seeding a trace with a zero tangent degrades
//! to a plain value-only forward pass at no extra node cost.

use super::tape::{ExprId, Tape};
use super::AdError;

/// Value/tangent pair of tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: ExprId,
    pub t: ExprId,
}

impl Tape {
    /// Shortcut-aware add: dropping interned-zero operands keeps tangent
    /// chains from materializing nodes that are identically zero.
    pub fn add_s(&mut self, a: ExprId, b: ExprId) -> ExprId {
        if a == self.zero() {
            return b;
        }
        if b == self.zero() {
            return a;
        }
        self.add(a, b)
    }

    pub fn sub_s(&mut self, a: ExprId, b: ExprId) -> ExprId {
        if b == self.zero() {
            return a;
        }
        if a == self.zero() {
            return self.neg(b);
        }
        self.sub(a, b)
    }

    pub fn mul_s(&mut self, a: ExprId, b: ExprId) -> ExprId {
        let zero = self.zero();
        if a == zero || b == zero {
            return zero;
        }
        if a == self.one() {
            return b;
        }
        if b == self.one() {
            return a;
        }
        self.mul(a, b)
    }

    /// Dual constant: zero tangent.
    pub fn dual_const(&mut self, v: f64) -> Dual {
        Dual {
            v: self.constant(v),
            t: self.zero(),
        }
    }

    /// Dual lift of an existing node that does not depend on the seed
    /// variable (weights, conditioning values).
    pub fn dual_lift(&mut self, v: ExprId) -> Dual {
        Dual { v, t: self.zero() }
    }

    /// The seed variable itself: named input with unit tangent.
    pub fn dual_input(&mut self, name: &str, value: f64) -> Dual {
        Dual {
            v: self.input(name, value),
            t: self.one(),
        }
    }

    pub fn d_add(&mut self, a: Dual, b: Dual) -> Dual {
        Dual {
            v: self.add(a.v, b.v),
            t: self.add_s(a.t, b.t),
        }
    }

    pub fn d_sub(&mut self, a: Dual, b: Dual) -> Dual {
        Dual {
            v: self.sub(a.v, b.v),
            t: self.sub_s(a.t, b.t),
        }
    }

    pub fn d_neg(&mut self, a: Dual) -> Dual {
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            self.neg(a.t)
        };
        Dual {
            v: self.neg(a.v),
            t,
        }
    }

    pub fn d_mul(&mut self, a: Dual, b: Dual) -> Dual {
        let v = self.mul(a.v, b.v);
        let left = self.mul_s(a.t, b.v);
        let right = self.mul_s(a.v, b.t);
        Dual {
            v,
            t: self.add_s(left, right),
        }
    }

    /// Multiply by a node constant in the seed variable (weight, scale).
    pub fn d_scale(&mut self, a: Dual, c: ExprId) -> Dual {
        Dual {
            v: self.mul(a.v, c),
            t: self.mul_s(a.t, c),
        }
    }

    pub fn d_tanh(&mut self, a: Dual) -> Dual {
        let y = self.tanh(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            let y2 = self.mul(y, y);
            let one = self.one();
            let d = self.sub(one, y2);
            self.mul_s(a.t, d)
        };
        Dual { v: y, t }
    }

    pub fn d_exp(&mut self, a: Dual) -> Dual {
        let y = self.exp(a.v);
        let t = self.mul_s(a.t, y);
        Dual { v: y, t }
    }

    pub fn d_recip(&mut self, a: Dual) -> Dual {
        let y = self.recip(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            let y2 = self.mul(y, y);
            let m = self.mul(a.t, y2);
            self.neg(m)
        };
        Dual { v: y, t }
    }

    pub fn d_sqrt(&mut self, a: Dual) -> Dual {
        let y = self.sqrt(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            let half = self.constant(0.5);
            let r = self.recip(y);
            let hr = self.mul(half, r);
            self.mul(a.t, hr)
        };
        Dual { v: y, t }
    }

    pub fn d_softplus(&mut self, a: Dual) -> Dual {
        let y = self.softplus(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            // d softplus = sigmoid(x) = 1/(1 + exp(-x))
            let nx = self.neg(a.v);
            let e = self.exp(nx);
            let one = self.one();
            let denom = self.add(one, e);
            let sig = self.recip(denom);
            self.mul(a.t, sig)
        };
        Dual { v: y, t }
    }

    pub fn d_sin(&mut self, a: Dual) -> Dual {
        let y = self.sin(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            let c = self.cos(a.v);
            self.mul(a.t, c)
        };
        Dual { v: y, t }
    }

    pub fn d_cos(&mut self, a: Dual) -> Dual {
        let y = self.cos(a.v);
        let t = if a.t == self.zero() {
            self.zero()
        } else {
            let s = self.sin(a.v);
            let ms = self.neg(s);
            self.mul(a.t, ms)
        };
        Dual { v: y, t }
    }

    /// Dual inner product over (dual, node-constant) pairs with fused chains
    /// for both halves. Weights are constant in the seed variable, so the
    /// tangent is just the same inner product over tangent components.
    pub fn d_dot(&mut self, pairs: &[(Dual, ExprId)], init: Option<ExprId>) -> Dual {
        let val_pairs: Vec<(ExprId, ExprId)> = pairs.iter().map(|&(d, w)| (d.v, w)).collect();
        let v = self.dot(&val_pairs, init);
        let zero = self.zero();
        let tan_pairs: Vec<(ExprId, ExprId)> = pairs
            .iter()
            .filter(|&&(d, _)| d.t != zero)
            .map(|&(d, w)| (d.t, w))
            .collect();
        let t = if tan_pairs.is_empty() {
            zero
        } else {
            self.dot(&tan_pairs, None)
        };
        Dual { v, t }
    }
}

/// Builds `f` at the seed point `(name, value)` and returns node handles for
/// `(f, df/d name)`. Both are ordinary graph nodes, so a reverse sweep over
/// either (or any expression containing them) yields weight gradients — the
/// one level of derivative nesting the physics residual needs.
pub fn time_derivative<F>(
    tape: &mut Tape,
    name: &str,
    value: f64,
    build: F,
) -> Result<(ExprId, ExprId), AdError>
where
    F: FnOnce(&mut Tape, Dual) -> Dual,
{
    let seed = tape.dual_input(name, value);
    let out = build(tape, seed);
    let tan = tape.value(out.t);
    if !tan.is_finite() {
        return Err(AdError::NonFiniteTangent { node: out.t.0 });
    }
    Ok((out.v, out.t))
}
