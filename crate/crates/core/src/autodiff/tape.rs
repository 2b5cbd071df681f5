use super::AdError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExprId(pub(crate) u32);

impl ExprId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One recorded operation. Operand handles always point at earlier nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Literal constant; not rebindable.
    Const,
    /// Named input, rebindable through [`Tape::evaluate`]. Payload is a slot
    /// into the tape's input table.
    Input(u32),
    /// Trainable parameter leaf. Payload is the flat parameter index the
    /// adjoint is accumulated into.
    Param(u32),
    Add(ExprId, ExprId),
    Sub(ExprId, ExprId),
    Mul(ExprId, ExprId),
    /// `a * b +` the value of the immediately preceding node. Emitted only by
    /// [`Tape::dot`], which guarantees the accumulator is at `self - 1`.
    MulAddPrev(ExprId, ExprId),
    Neg(ExprId),
    Recip(ExprId),
    Tanh(ExprId),
    Exp(ExprId),
    Sqrt(ExprId),
    Softplus(ExprId),
    Abs(ExprId),
    Max(ExprId, ExprId),
    Sin(ExprId),
    Cos(ExprId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulAddPrev(..) => "mul_add",
            Op::Neg(_) => "neg",
            Op::Recip(_) => "recip",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Max(..) => "max",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
        }
    }
}

/// Dense buffer of loss partials indexed by flat parameter id.
///
/// Parameters that do not appear in the differentiated graph keep their zero
/// entry, so the map always covers the full trainable vector.
#[derive(Clone, Debug)]
pub struct GradientMap {
    g: Vec<f64>,
}

impl GradientMap {
    pub fn zeros(n: usize) -> Self {
        GradientMap { g: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.g[idx]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.g
    }

    pub fn reset(&mut self) {
        self.g.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Adds `other` into `self` entry-wise.
    pub fn merge(&mut self, other: &GradientMap) {
        debug_assert_eq!(self.g.len(), other.g.len());
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    /// Scales every entry, used to fold batch-mean factors into a backward pass.
    pub fn scale(&mut self, s: f64) {
        self.g.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.g.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn accumulate(&mut self, idx: u32, v: f64) {
        self.g[idx as usize] += v;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow on either tail.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Flat expression tape: operations in `ops`, primal values in `vals`.
///
/// A tape is built once per evaluation in the training hot path (`clear`
/// keeps the allocations). The interned constants [`Tape::zero`] and
/// [`Tape::one`] let dual-number helpers collapse vanishing tangent terms at
/// build time.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    input_names: Vec<String>,
    /// Parameter leaf dedup: flat index -> (generation, node id). Guarantees
    /// one leaf per parameter per generation so loops (e.g. recurrent cells)
    /// reuse the same node.
    param_cache: Vec<(u32, u32)>,
    generation: u32,
    zero: ExprId,
    one: ExprId,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let mut t = Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            adj: Vec::new(),
            input_names: Vec::new(),
            param_cache: Vec::new(),
            generation: 0,
            zero: ExprId(0),
            one: ExprId(1),
        };
        t.intern_constants();
        t
    }

    fn intern_constants(&mut self) {
        self.zero = self.push(Op::Const, 0.0);
        self.one = self.push(Op::Const, 1.0);
    }

    /// Drops all nodes but keeps capacity. Parameter leaves recorded before
    /// the clear are forgotten via a generation bump, not a table wipe.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.input_names.clear();
        self.generation = self.generation.wrapping_add(1);
        self.intern_constants();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        // The two interned constants are structural, not user content.
        self.ops.len() <= 2
    }

    pub fn zero(&self) -> ExprId {
        self.zero
    }

    pub fn one(&self) -> ExprId {
        self.one
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> ExprId {
        let id = ExprId(self.ops.len() as u32);
        self.ops.push(op);
        self.vals.push(val);
        id
    }

    #[inline]
    pub fn value(&self, id: ExprId) -> f64 {
        self.vals[id.index()]
    }

    /// Op tag and cached primal for a node; diagnostic surface.
    pub fn node(&self, id: ExprId) -> Option<(Op, f64)> {
        let i = id.index();
        if i < self.ops.len() {
            Some((self.ops[i], self.vals[i]))
        } else {
            None
        }
    }

    pub fn constant(&mut self, v: f64) -> ExprId {
        if v == 0.0 {
            return self.zero;
        }
        if v == 1.0 {
            return self.one;
        }
        self.push(Op::Const, v)
    }

    /// Registers a named, rebindable input holding `v` until rebound.
    pub fn input(&mut self, name: &str, v: f64) -> ExprId {
        let slot = self.input_names.len() as u32;
        self.input_names.push(name.to_string());
        self.push(Op::Input(slot), v)
    }

    /// Parameter leaf for flat index `idx`; deduplicated per generation.
    pub fn param(&mut self, idx: u32, v: f64) -> ExprId {
        let i = idx as usize;
        if i >= self.param_cache.len() {
            self.param_cache.resize(i + 1, (u32::MAX, 0));
        }
        let (gen, node) = self.param_cache[i];
        if gen == self.generation {
            return ExprId(node);
        }
        let id = self.push(Op::Param(idx), v);
        self.param_cache[i] = (self.generation, id.0);
        id
    }

    #[inline]
    pub fn add(&mut self, a: ExprId, b: ExprId) -> ExprId {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(Op::Add(a, b), v)
    }

    #[inline]
    pub fn sub(&mut self, a: ExprId, b: ExprId) -> ExprId {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(Op::Sub(a, b), v)
    }

    #[inline]
    pub fn mul(&mut self, a: ExprId, b: ExprId) -> ExprId {
        let v = self.vals[a.index()] * self.vals[b.index()];
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: ExprId) -> ExprId {
        let v = -self.vals[a.index()];
        self.push(Op::Neg(a), v)
    }

    pub fn recip(&mut self, a: ExprId) -> ExprId {
        let v = 1.0 / self.vals[a.index()];
        self.push(Op::Recip(a), v)
    }

    pub fn tanh(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].exp();
        self.push(Op::Exp(a), v)
    }

    pub fn sqrt(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].sqrt();
        self.push(Op::Sqrt(a), v)
    }

    pub fn softplus(&mut self, a: ExprId) -> ExprId {
        let v = softplus(self.vals[a.index()]);
        self.push(Op::Softplus(a), v)
    }

    pub fn abs(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].abs();
        self.push(Op::Abs(a), v)
    }

    /// Elementwise maximum; ties route the adjoint to the first operand.
    pub fn max(&mut self, a: ExprId, b: ExprId) -> ExprId {
        let v = self.vals[a.index()].max(self.vals[b.index()]);
        self.push(Op::Max(a, b), v)
    }

    pub fn sin(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].sin();
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: ExprId) -> ExprId {
        let v = self.vals[a.index()].cos();
        self.push(Op::Cos(a), v)
    }

    /// Squared value, a common loss fragment.
    pub fn square(&mut self, a: ExprId) -> ExprId {
        self.mul(a, a)
    }

    /// Inner product `sum_i pairs[i].0 * pairs[i].1 (+ init)` built as a fused
    /// multiply-accumulate chain: one node per term after the first.
    pub fn dot(&mut self, pairs: &[(ExprId, ExprId)], init: Option<ExprId>) -> ExprId {
        let mut iter = pairs.iter();
        let mut acc = match iter.next() {
            Some(&(x, w)) => self.mul(x, w),
            None => return init.unwrap_or(self.zero),
        };
        for &(x, w) in iter {
            let v = self.vals[x.index()] * self.vals[w.index()] + self.vals[acc.index()];
            debug_assert_eq!(acc.0 + 1, self.ops.len() as u32);
            acc = self.push(Op::MulAddPrev(x, w), v);
        }
        match init {
            Some(b) => self.add(acc, b),
            None => acc,
        }
    }

    /// Recomputes every node value with inputs taken from `bindings` and
    /// returns the primal at `output`. All named inputs must be bound; any
    /// non-finite intermediate aborts with the offending node.
    pub fn evaluate(&mut self, output: ExprId, bindings: &[(&str, f64)]) -> Result<f64, AdError> {
        if output.index() >= self.ops.len() {
            return Err(AdError::UnknownNode(output.0));
        }
        let mut slot_vals = vec![f64::NAN; self.input_names.len()];
        for (slot, name) in self.input_names.iter().enumerate() {
            match bindings.iter().find(|(n, _)| n == name) {
                Some(&(_, v)) => slot_vals[slot] = v,
                None => return Err(AdError::UnboundInput(name.clone())),
            }
        }
        self.forward_sweep(&slot_vals)?;
        Ok(self.vals[output.index()])
    }

    /// Rewrites every parameter leaf from the flat vector `params` and
    /// recomputes the whole tape in place. Input leaves keep their current
    /// values. This is the training hot path: a graph is traced once, then
    /// replayed once per optimization step instead of being rebuilt.
    ///
    /// Panics if a leaf's parameter index is out of range for `params`.
    pub fn replay(&mut self, params: &[f64]) -> Result<(), AdError> {
        let mut slot_vals = vec![f64::NAN; self.input_names.len()];
        for i in 0..self.ops.len() {
            match self.ops[i] {
                Op::Param(idx) => self.vals[i] = params[idx as usize],
                // Inputs keep their last value across the replay.
                Op::Input(slot) => slot_vals[slot as usize] = self.vals[i],
                _ => {}
            }
        }
        self.forward_sweep(&slot_vals)
    }

    fn forward_sweep(&mut self, slot_vals: &[f64]) -> Result<(), AdError> {
        for i in 0..self.ops.len() {
            let v = match self.ops[i] {
                Op::Const => self.vals[i],
                Op::Param(_) => self.vals[i],
                Op::Input(slot) => slot_vals[slot as usize],
                Op::Add(a, b) => self.vals[a.index()] + self.vals[b.index()],
                Op::Sub(a, b) => self.vals[a.index()] - self.vals[b.index()],
                Op::Mul(a, b) => self.vals[a.index()] * self.vals[b.index()],
                Op::MulAddPrev(a, b) => {
                    self.vals[a.index()] * self.vals[b.index()] + self.vals[i - 1]
                }
                Op::Neg(a) => -self.vals[a.index()],
                Op::Recip(a) => 1.0 / self.vals[a.index()],
                Op::Tanh(a) => self.vals[a.index()].tanh(),
                Op::Exp(a) => self.vals[a.index()].exp(),
                Op::Sqrt(a) => self.vals[a.index()].sqrt(),
                Op::Softplus(a) => softplus(self.vals[a.index()]),
                Op::Abs(a) => self.vals[a.index()].abs(),
                Op::Max(a, b) => self.vals[a.index()].max(self.vals[b.index()]),
                Op::Sin(a) => self.vals[a.index()].sin(),
                Op::Cos(a) => self.vals[a.index()].cos(),
            };
            if !v.is_finite() {
                return Err(AdError::NonFinite {
                    node: i as u32,
                    op: self.ops[i].name(),
                });
            }
            self.vals[i] = v;
        }
        Ok(())
    }

    /// Reverse sweep from a single output seeded with adjoint 1.
    pub fn backward(&mut self, output: ExprId, grads: &mut GradientMap) -> Result<(), AdError> {
        self.backward_seeded(&[(output, 1.0)], grads)
    }

    /// Reverse sweep with arbitrary seed adjoints. Parameter partials
    /// accumulate into `grads`; adjoints of every node stay readable through
    /// [`Tape::adjoint`] until the tape is touched again.
    pub fn backward_seeded(
        &mut self,
        seeds: &[(ExprId, f64)],
        grads: &mut GradientMap,
    ) -> Result<(), AdError> {
        let n = self.ops.len();
        self.adj.clear();
        self.adj.resize(n, 0.0);
        for &(id, w) in seeds {
            if id.index() >= n {
                return Err(AdError::UnknownNode(id.0));
            }
            self.adj[id.index()] += w;
        }
        for i in (0..n).rev() {
            let w = self.adj[i];
            if w == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const | Op::Input(_) => {}
                Op::Param(idx) => grads.accumulate(idx, w),
                Op::Add(a, b) => {
                    self.adj[a.index()] += w;
                    self.adj[b.index()] += w;
                }
                Op::Sub(a, b) => {
                    self.adj[a.index()] += w;
                    self.adj[b.index()] -= w;
                }
                Op::Mul(a, b) => {
                    self.adj[a.index()] += w * self.vals[b.index()];
                    self.adj[b.index()] += w * self.vals[a.index()];
                }
                Op::MulAddPrev(a, b) => {
                    self.adj[a.index()] += w * self.vals[b.index()];
                    self.adj[b.index()] += w * self.vals[a.index()];
                    self.adj[i - 1] += w;
                }
                Op::Neg(a) => self.adj[a.index()] -= w,
                Op::Recip(a) => {
                    let y = self.vals[i];
                    self.adj[a.index()] -= w * y * y;
                }
                Op::Tanh(a) => {
                    let y = self.vals[i];
                    self.adj[a.index()] += w * (1.0 - y * y);
                }
                Op::Exp(a) => self.adj[a.index()] += w * self.vals[i],
                Op::Sqrt(a) => {
                    let y = self.vals[i];
                    self.adj[a.index()] += w * 0.5 / y;
                }
                Op::Softplus(a) => {
                    self.adj[a.index()] += w * sigmoid(self.vals[a.index()]);
                }
                Op::Abs(a) => {
                    let x = self.vals[a.index()];
                    let s = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    self.adj[a.index()] += w * s;
                }
                Op::Max(a, b) => {
                    if self.vals[a.index()] >= self.vals[b.index()] {
                        self.adj[a.index()] += w;
                    } else {
                        self.adj[b.index()] += w;
                    }
                }
                Op::Sin(a) => {
                    self.adj[a.index()] += w * self.vals[a.index()].cos();
                }
                Op::Cos(a) => {
                    self.adj[a.index()] -= w * self.vals[a.index()].sin();
                }
            }
        }
        Ok(())
    }

    /// Adjoint of `id` after the most recent backward sweep.
    pub fn adjoint(&self, id: ExprId) -> f64 {
        self.adj[id.index()]
    }

    /// First node holding a non-finite value, if any; used to turn a bad loss
    /// into a diagnostic without paying a check per node in the hot path.
    pub fn find_nonfinite(&self) -> Option<(ExprId, &'static str)> {
        for (i, v) in self.vals.iter().enumerate() {
            if !v.is_finite() {
                return Some((ExprId(i as u32), self.ops[i].name()));
            }
        }
        None
    }
}
