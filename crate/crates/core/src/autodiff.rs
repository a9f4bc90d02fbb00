//! Scalar expression graphs with symbolic and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of hash-consed nodes. Because operands
//! are always created before their consumers, node index order is a valid
//! topological order. [`Graph::differentiate`] returns a new node in the same
//! arena, so derivatives can be nested to arbitrary order.
//!
//! The `elu` activation uses the right-hand rule at its kink: first
//! derivative 1 at `x = 0`, and all higher derivatives take the `x > 0`
//! branch there (i.e. 0).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("non-finite result at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("variable {0:?} is not declared in this graph")]
    UnknownVariable(VarId),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(u32);

impl Expr {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Input,
    Parameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Square,
    Sin,
    Cos,
    Exp,
    Tanh,
    Elu,
    /// First derivative of elu: 1 for x >= 0, e^x otherwise.
    EluStep,
    /// Higher derivatives of elu: 0 for x >= 0, e^x otherwise.
    EluNegExp,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryOp::EluStep => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            UnaryOp::EluNegExp => {
                if x >= 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// d op(x) / dx given x and op(x).
    fn local_derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Exp => y,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Elu => UnaryOp::EluStep.apply(x),
            UnaryOp::EluStep | UnaryOp::EluNegExp => UnaryOp::EluNegExp.apply(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Square => "square",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Elu => "elu",
            UnaryOp::EluStep => "elu'",
            UnaryOp::EluNegExp => "elu''",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Node {
    /// Stored as raw bits so nodes can be hashed.
    Const(u64),
    Var(VarId),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
    PowI(Expr, u32),
}

#[derive(Clone, Debug)]
struct VarInfo {
    name: String,
    kind: VarKind,
}

/// Append-only expression arena.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    dedup: HashMap<Node, Expr>,
    vars: Vec<VarInfo>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("vars", &self.vars.len())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total number of nodes in the arena.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Expr {
        if let Some(&e) = self.dedup.get(&node) {
            return e;
        }
        let e = Expr(u32::try_from(self.nodes.len()).expect("graph exceeds u32 nodes"));
        self.nodes.push(node);
        self.dedup.insert(node, e);
        e
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> VarId {
        let id = VarId(self.vars.len() as u32);
        self.vars.push(VarInfo {
            name: name.to_string(),
            kind,
        });
        id
    }

    /// Declares an input variable and returns its id.
    pub fn input(&mut self, name: &str) -> VarId {
        self.declare(name, VarKind::Input)
    }

    pub fn parameter(&mut self, name: &str) -> VarId {
        self.declare(name, VarKind::Parameter)
    }

    pub fn var_name(&self, var: VarId) -> &str {
        &self.vars[var.index()].name
    }

    pub fn var_kind(&self, var: VarId) -> VarKind {
        self.vars[var.index()].kind
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn var(&mut self, var: VarId) -> Expr {
        assert!(var.index() < self.vars.len(), "undeclared variable {var:?}");
        self.push(Node::Var(var))
    }

    pub fn constant(&mut self, c: f64) -> Expr {
        // -0.0 and 0.0 share a node.
        let c = if c == 0.0 { 0.0 } else { c };
        self.push(Node::Const(c.to_bits()))
    }

    pub fn zero(&mut self) -> Expr {
        self.constant(0.0)
    }

    pub fn one(&mut self) -> Expr {
        self.constant(1.0)
    }

    fn as_const(&self, e: Expr) -> Option<f64> {
        match self.nodes[e.index()] {
            Node::Const(bits) => Some(f64::from_bits(bits)),
            _ => None,
        }
    }

    fn is_const(&self, e: Expr, c: f64) -> bool {
        self.as_const(e) == Some(c)
    }

    fn fold(&mut self, value: f64) -> Option<Expr> {
        value.is_finite().then(|| self.constant(value))
    }

    pub fn add(&mut self, a: Expr, b: Expr) -> Expr {
        if self.is_const(a, 0.0) {
            return b;
        }
        if self.is_const(b, 0.0) {
            return a;
        }
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            if let Some(e) = self.fold(x + y) {
                return e;
            }
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.push(Node::Binary(BinaryOp::Add, a, b))
    }

    pub fn sub(&mut self, a: Expr, b: Expr) -> Expr {
        if self.is_const(b, 0.0) {
            return a;
        }
        if a == b {
            return self.zero();
        }
        if self.is_const(a, 0.0) {
            return self.neg(b);
        }
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            if let Some(e) = self.fold(x - y) {
                return e;
            }
        }
        self.push(Node::Binary(BinaryOp::Sub, a, b))
    }

    pub fn mul(&mut self, a: Expr, b: Expr) -> Expr {
        if self.is_const(a, 0.0) || self.is_const(b, 0.0) {
            return self.zero();
        }
        if self.is_const(a, 1.0) {
            return b;
        }
        if self.is_const(b, 1.0) {
            return a;
        }
        if self.is_const(a, -1.0) {
            return self.neg(b);
        }
        if self.is_const(b, -1.0) {
            return self.neg(a);
        }
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            if let Some(e) = self.fold(x * y) {
                return e;
            }
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.push(Node::Binary(BinaryOp::Mul, a, b))
    }

    pub fn div(&mut self, a: Expr, b: Expr) -> Expr {
        if self.is_const(b, 1.0) {
            return a;
        }
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            if let Some(e) = self.fold(x / y) {
                return e;
            }
        }
        self.push(Node::Binary(BinaryOp::Div, a, b))
    }

    /// Integer power `a^n` with `n >= 0`.
    pub fn powi(&mut self, a: Expr, n: u32) -> Expr {
        match n {
            0 => return self.one(),
            1 => return a,
            _ => {}
        }
        if let Some(x) = self.as_const(a) {
            if let Some(e) = self.fold(x.powi(n as i32)) {
                return e;
            }
        }
        self.push(Node::PowI(a, n))
    }

    fn unary(&mut self, op: UnaryOp, a: Expr) -> Expr {
        if let Some(x) = self.as_const(a) {
            if let Some(e) = self.fold(op.apply(x)) {
                return e;
            }
        }
        self.push(Node::Unary(op, a))
    }

    pub fn neg(&mut self, a: Expr) -> Expr {
        if let Node::Unary(UnaryOp::Neg, inner) = self.nodes[a.index()] {
            return inner;
        }
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sin(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Sin, a)
    }

    pub fn cos(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Cos, a)
    }

    pub fn exp(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn tanh(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn elu(&mut self, a: Expr) -> Expr {
        self.unary(UnaryOp::Elu, a)
    }

    /// Sum of a slice; zero for an empty slice.
    pub fn sum(&mut self, terms: &[Expr]) -> Expr {
        let mut acc = self.zero();
        for &t in terms {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Marks every node reachable from `roots`.
    fn reachable(&self, roots: &[Expr]) -> Vec<bool> {
        let upper = roots.iter().map(|r| r.index() + 1).max().unwrap_or(0);
        let mut mark = vec![false; upper];
        for r in roots {
            mark[r.index()] = true;
        }
        for i in (0..upper).rev() {
            if !mark[i] {
                continue;
            }
            match self.nodes[i] {
                Node::Unary(_, a) | Node::PowI(a, _) => mark[a.index()] = true,
                Node::Binary(_, a, b) => {
                    mark[a.index()] = true;
                    mark[b.index()] = true;
                }
                Node::Const(_) | Node::Var(_) => {}
            }
        }
        mark
    }

    /// Number of distinct nodes an expression depends on, itself included.
    pub fn node_count(&self, expr: Expr) -> usize {
        self.reachable(&[expr]).iter().filter(|&&m| m).count()
    }

    /// Symbolic derivative of `expr` with respect to `var`.
    ///
    /// Forward-mode over the reachable subgraph: each node gets at most one
    /// tangent node, so a single level grows the graph by a bounded factor.
    pub fn differentiate(&mut self, expr: Expr, var: VarId) -> Expr {
        let mark = self.reachable(&[expr]);
        let zero = self.zero();
        let mut tangent: Vec<Expr> = vec![zero; mark.len()];
        for i in 0..mark.len() {
            if !mark[i] {
                continue;
            }
            let node = self.nodes[i];
            let this = Expr(i as u32);
            tangent[i] = match node {
                Node::Const(_) => zero,
                Node::Var(v) => {
                    if v == var {
                        self.one()
                    } else {
                        zero
                    }
                }
                Node::Binary(op, a, b) => {
                    let (da, db) = (tangent[a.index()], tangent[b.index()]);
                    match op {
                        BinaryOp::Add => self.add(da, db),
                        BinaryOp::Sub => self.sub(da, db),
                        BinaryOp::Mul => {
                            let l = self.mul(da, b);
                            let r = self.mul(a, db);
                            self.add(l, r)
                        }
                        BinaryOp::Div => {
                            // (da - this * db) / b
                            let t = self.mul(this, db);
                            let num = self.sub(da, t);
                            self.div(num, b)
                        }
                    }
                }
                Node::PowI(a, n) => {
                    let da = tangent[a.index()];
                    if da == zero {
                        zero
                    } else {
                        let p = self.powi(a, n - 1);
                        let c = self.constant(n as f64);
                        let cp = self.mul(c, p);
                        self.mul(cp, da)
                    }
                }
                Node::Unary(op, a) => {
                    let da = tangent[a.index()];
                    if da == zero {
                        zero
                    } else {
                        let local = match op {
                            UnaryOp::Neg => self.constant(-1.0),
                            UnaryOp::Square => {
                                let two = self.constant(2.0);
                                self.mul(two, a)
                            }
                            UnaryOp::Sin => self.cos(a),
                            UnaryOp::Cos => {
                                let s = self.sin(a);
                                self.neg(s)
                            }
                            UnaryOp::Exp => this,
                            UnaryOp::Tanh => {
                                let one = self.one();
                                let sq = self.square(this);
                                self.sub(one, sq)
                            }
                            UnaryOp::Elu => self.unary(UnaryOp::EluStep, a),
                            UnaryOp::EluStep | UnaryOp::EluNegExp => {
                                self.unary(UnaryOp::EluNegExp, a)
                            }
                        };
                        self.mul(local, da)
                    }
                }
            };
        }
        tangent[expr.index()]
    }

    /// Repeated differentiation: `∂^n expr / ∂var^n`.
    pub fn differentiate_n(&mut self, expr: Expr, var: VarId, n: usize) -> Expr {
        (0..n).fold(expr, |e, _| self.differentiate(e, var))
    }

    /// Compiles the subgraph reachable from `roots` into a linear program.
    pub fn compile(&self, roots: &[Expr]) -> Program {
        let mark = self.reachable(roots);
        let mut slot_of = vec![u32::MAX; mark.len()];
        let mut instrs = Vec::new();
        let mut origin = Vec::new();
        let mut var_slots = Vec::new();
        for (i, &m) in mark.iter().enumerate() {
            if !m {
                continue;
            }
            let slot = instrs.len() as u32;
            slot_of[i] = slot;
            let s = |e: Expr| slot_of[e.index()];
            let instr = match self.nodes[i] {
                Node::Const(bits) => Instr::Const(f64::from_bits(bits)),
                Node::Var(v) => {
                    var_slots.push((v, slot));
                    Instr::Var(v)
                }
                Node::Unary(op, a) => Instr::Unary(op, s(a)),
                Node::Binary(op, a, b) => Instr::Binary(op, s(a), s(b)),
                Node::PowI(a, n) => Instr::PowI(s(a), n),
            };
            instrs.push(instr);
            origin.push(i);
        }
        Program {
            instrs,
            origin,
            roots: roots.iter().map(|r| slot_of[r.index()]).collect(),
            var_names: self.vars.iter().map(|v| v.name.clone()).collect(),
            var_slots: {
                let mut by_var = vec![u32::MAX; self.vars.len()];
                for (v, slot) in var_slots {
                    by_var[v.index()] = slot;
                }
                by_var
            },
        }
    }

    /// One-shot evaluation of a single expression.
    pub fn evaluate(&self, expr: Expr, bindings: &Bindings) -> Result<f64> {
        let program = self.compile(&[expr]);
        let mut scratch = Vec::new();
        program.evaluate(bindings, &mut scratch)?;
        Ok(program.root_value(0, &scratch))
    }

    /// Reverse-mode gradient of `expr` with respect to `params`, in order.
    pub fn gradient(
        &self,
        expr: Expr,
        params: &[VarId],
        bindings: &Bindings,
    ) -> Result<GradientVector> {
        let program = self.compile(&[expr]);
        let mut scratch = Scratch::default();
        let mut out = vec![0.0; params.len()];
        program.accumulate_gradient(0, params, bindings, 1.0, &mut scratch, &mut out)?;
        Ok(GradientVector::new(out))
    }
}

/// Values for the free variables of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: Vec<Option<f64>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, var: VarId, value: f64) -> &mut Self {
        let i = var.index();
        if self.values.len() <= i {
            self.values.resize(i + 1, None);
        }
        self.values[i] = Some(value);
        self
    }

    pub fn with(mut self, var: VarId, value: f64) -> Self {
        self.set(var, value);
        self
    }

    pub fn get(&self, var: VarId) -> Option<f64> {
        self.values.get(var.index()).copied().flatten()
    }
}

/// Gradient of one objective over an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub objective: usize,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            objective: 0,
            values,
        }
    }

    pub fn for_objective(mut self, k: usize) -> Self {
        self.objective = k;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Instr {
    Const(f64),
    Var(VarId),
    Unary(UnaryOp, u32),
    Binary(BinaryOp, u32, u32),
    PowI(u32, u32),
}

/// Caller-owned buffers for repeated gradient sweeps.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

/// A compiled, immutable subgraph. Safe to share between threads; every
/// evaluation writes only into the caller's scratch buffers.
#[derive(Clone, Debug)]
pub struct Program {
    instrs: Vec<Instr>,
    origin: Vec<usize>,
    roots: Vec<u32>,
    var_names: Vec<String>,
    /// Slot of each declared variable, `u32::MAX` when unused.
    var_slots: Vec<u32>,
}

impl Program {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn num_roots(&self) -> usize {
        self.roots.len()
    }

    fn tag(&self, slot: usize) -> &'static str {
        match self.instrs[slot] {
            Instr::Const(_) => "const",
            Instr::Var(_) => "var",
            Instr::Unary(op, _) => op.name(),
            Instr::Binary(op, _, _) => op.name(),
            Instr::PowI(..) => "powi",
        }
    }

    /// Forward pass; `values` is resized and overwritten.
    pub fn evaluate(&self, bindings: &Bindings, values: &mut Vec<f64>) -> Result<()> {
        values.clear();
        values.reserve(self.instrs.len());
        for (slot, instr) in self.instrs.iter().enumerate() {
            let v = match *instr {
                Instr::Const(c) => c,
                Instr::Var(var) => bindings.get(var).ok_or_else(|| {
                    AutodiffError::UnboundVariable(self.var_names[var.index()].clone())
                })?,
                Instr::Unary(op, a) => op.apply(values[a as usize]),
                Instr::Binary(op, a, b) => op.apply(values[a as usize], values[b as usize]),
                Instr::PowI(a, n) => values[a as usize].powi(n as i32),
            };
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: self.origin[slot],
                    op: self.tag(slot),
                });
            }
            values.push(v);
        }
        Ok(())
    }

    pub fn root_value(&self, root: usize, values: &[f64]) -> f64 {
        values[self.roots[root] as usize]
    }

    /// Evaluates every root.
    pub fn evaluate_roots(&self, bindings: &Bindings, values: &mut Vec<f64>) -> Result<Vec<f64>> {
        self.evaluate(bindings, values)?;
        Ok(self.roots.iter().map(|&r| values[r as usize]).collect())
    }

    /// Adds `weight * ∂root/∂params` into `out` and returns the root value.
    pub fn accumulate_gradient(
        &self,
        root: usize,
        params: &[VarId],
        bindings: &Bindings,
        weight: f64,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<f64> {
        assert_eq!(params.len(), out.len());
        self.evaluate(bindings, &mut scratch.values)?;
        let values = &scratch.values;
        let adj = &mut scratch.adjoints;
        adj.clear();
        adj.resize(self.instrs.len(), 0.0);
        let r = self.roots[root] as usize;
        adj[r] = 1.0;
        for slot in (0..=r).rev() {
            let g = adj[slot];
            if g == 0.0 {
                continue;
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: self.origin[slot],
                    op: self.tag(slot),
                });
            }
            match self.instrs[slot] {
                Instr::Const(_) | Instr::Var(_) => {}
                Instr::Unary(op, a) => {
                    let a = a as usize;
                    adj[a] += g * op.local_derivative(values[a], values[slot]);
                }
                Instr::Binary(op, a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    match op {
                        BinaryOp::Add => {
                            adj[a] += g;
                            adj[b] += g;
                        }
                        BinaryOp::Sub => {
                            adj[a] += g;
                            adj[b] -= g;
                        }
                        BinaryOp::Mul => {
                            adj[a] += g * values[b];
                            adj[b] += g * values[a];
                        }
                        BinaryOp::Div => {
                            adj[a] += g / values[b];
                            adj[b] -= g * values[slot] / values[b];
                        }
                    }
                }
                Instr::PowI(a, n) => {
                    let a = a as usize;
                    adj[a] += g * n as f64 * values[a].powi(n as i32 - 1);
                }
            }
        }
        for (i, p) in params.iter().enumerate() {
            match self.var_slots.get(p.index()) {
                Some(&slot) if slot != u32::MAX => out[i] += weight * adj[slot as usize],
                Some(_) => {}
                None => return Err(AutodiffError::UnknownVariable(*p)),
            }
        }
        Ok(values[r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn evaluates_trivial_cases() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let (xe, ye) = (g.var(x), g.var(y));
        let s = g.sin(xe);
        assert_eq!(g.evaluate(s, &Bindings::new().with(x, 0.0)).unwrap(), 0.0);
        let xy = g.mul(xe, ye);
        let y2 = g.square(ye);
        let e = g.add(xy, y2);
        let b = Bindings::new().with(x, 2.0).with(y, 3.0);
        assert_eq!(g.evaluate(e, &b).unwrap(), 15.0);
        let t = g.tanh(xe);
        assert_eq!(g.evaluate(t, &Bindings::new().with(x, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn unbound_variable_is_named() {
        let mut g = Graph::new();
        let x = g.input("alpha");
        let xe = g.var(x);
        let s = g.sin(xe);
        let err = g.evaluate(s, &Bindings::new()).unwrap_err();
        assert_eq!(err, AutodiffError::UnboundVariable("alpha".into()));
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn division_by_zero_is_non_finite() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xe = g.var(x);
        let one = g.one();
        let q = g.div(one, xe);
        let err = g.evaluate(q, &Bindings::new().with(x, 0.0)).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { op: "div", .. }));
    }

    #[test]
    fn symbolic_derivatives_of_sin_and_cube() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xe = g.var(x);
        let s = g.sin(xe);
        let d1 = g.differentiate(s, x);
        assert_eq!(g.evaluate(d1, &Bindings::new().with(x, 0.0)).unwrap(), 1.0);
        let d4 = g.differentiate_n(s, x, 4);
        let v = g.evaluate(d4, &Bindings::new().with(x, 1.0)).unwrap();
        assert!((v - 0.8414709848).abs() < 1e-10);
        let c = g.powi(xe, 3);
        let d2 = g.differentiate_n(c, x, 2);
        assert_eq!(g.evaluate(d2, &Bindings::new().with(x, 2.0)).unwrap(), 12.0);
    }

    #[test]
    fn reverse_gradients_of_small_expressions() {
        let mut g = Graph::new();
        let w = g.parameter("w");
        let b = g.parameter("b");
        let x = g.input("x");
        let (we, be, xe) = (g.var(w), g.var(b), g.var(x));
        let wx = g.mul(we, xe);
        let lin = g.add(wx, be);
        let bind = Bindings::new().with(w, 1.0).with(b, 0.0).with(x, 3.0);
        let grad = g.gradient(lin, &[w, b], &bind).unwrap();
        assert_eq!(grad.values, vec![3.0, 1.0]);

        let s = g.sin(wx);
        let bind = Bindings::new().with(w, 0.0).with(x, 2.0);
        assert_eq!(g.gradient(s, &[w], &bind).unwrap().values, vec![2.0]);
    }

    #[test]
    fn elu_right_hand_rule_at_kink() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xe = g.var(x);
        let e = g.elu(xe);
        let at0 = Bindings::new().with(x, 0.0);
        assert_eq!(g.evaluate(e, &at0).unwrap(), 0.0);
        let d1 = g.differentiate(e, x);
        assert_eq!(g.evaluate(d1, &at0).unwrap(), 1.0);
        let d2 = g.differentiate(d1, x);
        assert_eq!(g.evaluate(d2, &at0).unwrap(), 0.0);
        let neg = Bindings::new().with(x, -1.0);
        let d3 = g.differentiate(d2, x);
        assert!(close(g.evaluate(d3, &neg).unwrap(), (-1.0f64).exp(), 1e-15));
        // reverse mode agrees at the kink
        let grad = g.gradient(e, &[x], &at0).unwrap();
        assert_eq!(grad.values, vec![1.0]);
    }

    #[test]
    fn hash_consing_shares_subgraphs() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xe = g.var(x);
        let a = g.sin(xe);
        let b = g.sin(xe);
        assert_eq!(a, b);
        let n = g.len();
        let _ = g.mul(a, b);
        let _ = g.mul(b, a);
        assert_eq!(g.len(), n + 1);
    }

    /// Builds a random composition over every op with the given variables.
    fn random_expr(g: &mut Graph, leaves: &[Expr], choices: &[u8]) -> Expr {
        let mut stack: Vec<Expr> = leaves.to_vec();
        for (i, &c) in choices.iter().enumerate() {
            let a = stack[i % stack.len()];
            let b = stack[(i * 7 + 3) % stack.len()];
            let e = match c % 12 {
                0 => g.add(a, b),
                1 => g.sub(a, b),
                2 => g.mul(a, b),
                3 => {
                    // keep the denominator away from zero
                    let sq = g.square(b);
                    let one = g.one();
                    let den = g.add(sq, one);
                    g.div(a, den)
                }
                4 => g.powi(a, 3),
                5 => g.sin(a),
                6 => g.cos(a),
                7 => {
                    let t = g.tanh(a);
                    g.exp(t)
                }
                8 => g.tanh(a),
                9 => g.elu(a),
                10 => g.neg(a),
                _ => g.square(a),
            };
            stack.push(e);
        }
        *stack.last().unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reverse_matches_symbolic(
            choices in proptest::collection::vec(0u8..12, 1..14),
            xv in 0.1f64..1.5, yv in -1.5f64..-0.1,
        ) {
            let mut g = Graph::new();
            let x = g.parameter("x");
            let y = g.parameter("y");
            let leaves = [g.var(x), g.var(y)];
            let e = random_expr(&mut g, &leaves, &choices);
            let b = Bindings::new().with(x, xv).with(y, yv);
            let grad = g.gradient(e, &[x, y], &b).unwrap();
            let dx = g.differentiate(e, x);
            let dy = g.differentiate(e, y);
            let sx = g.evaluate(dx, &b).unwrap();
            let sy = g.evaluate(dy, &b).unwrap();
            let scale = sx.abs().max(sy.abs()).max(1e-12);
            prop_assert!((grad.values[0] - sx).abs() <= 1e-12 * scale.max(grad.values[0].abs()) + 1e-300,
                "{} vs {}", grad.values[0], sx);
            prop_assert!((grad.values[1] - sy).abs() <= 1e-12 * scale.max(grad.values[1].abs()) + 1e-300,
                "{} vs {}", grad.values[1], sy);
        }

        #[test]
        fn mixed_partials_commute(
            choices in proptest::collection::vec(0u8..12, 1..10),
            xv in 0.1f64..1.2, yv in 0.1f64..1.2,
        ) {
            let mut g = Graph::new();
            let x = g.input("x");
            let y = g.input("y");
            let leaves = [g.var(x), g.var(y)];
            let e = random_expr(&mut g, &leaves, &choices);
            let dx = g.differentiate(e, x);
            let dxy = g.differentiate(dx, y);
            let dy = g.differentiate(e, y);
            let dyx = g.differentiate(dy, x);
            let b = Bindings::new().with(x, xv).with(y, yv);
            let a = g.evaluate(dxy, &b).unwrap();
            let c = g.evaluate(dyx, &b).unwrap();
            prop_assert!((a - c).abs() <= 1e-10 * a.abs().max(c.abs()).max(1.0), "{a} vs {c}");
        }
    }
}
