//! Small composable network blocks on top of the op graph. Each block comes
//! as a `register_*` half that creates named parameters and a builder half
//! that binds them into a graph.

use rand::Rng;

use crate::diff::{bind, Graph, GraphError, NodeId, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

pub fn register_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    store.add_conv(name, cout, cin, k, rng);
}

pub fn conv(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId, GraphError> {
    let w = bind(g, store, &alloc::format!("{name}.w"))?;
    let b = bind(g, store, &alloc::format!("{name}.b"))?;
    g.conv2d(x, w, b, stride, pad)
}

pub fn register_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.add_norm(name, c);
}

pub fn norm(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let gamma = bind(g, store, &alloc::format!("{name}.g"))?;
    let beta = bind(g, store, &alloc::format!("{name}.s"))?;
    g.instance_norm(x, gamma, beta, NORM_EPS)
}

/// conv k=3 -> instance norm -> relu
pub fn register_conv_norm_relu(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    register_conv(store, name, cout, cin, k, rng);
    store.add_norm(&alloc::format!("{name}.n"), cout);
}

pub fn conv_norm_relu(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId, GraphError> {
    let c = conv(g, store, name, x, stride, pad)?;
    let n = norm(g, store, &alloc::format!("{name}.n"), c)?;
    Ok(g.relu(n))
}

/// Double convolutional block: (conv3x3 -> norm -> relu) twice.
pub fn register_double_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    register_conv_norm_relu(store, &alloc::format!("{name}.1"), cout, cin, 3, rng);
    register_conv_norm_relu(store, &alloc::format!("{name}.2"), cout, cout, 3, rng);
}

pub fn double_conv(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let h = conv_norm_relu(g, store, &alloc::format!("{name}.1"), x, 1, 1)?;
    conv_norm_relu(g, store, &alloc::format!("{name}.2"), h, 1, 1)
}

pub fn register_linear(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    rng: &mut impl Rng,
) {
    store.add_linear(name, cout, cin, rng);
}

pub fn linear(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let w = bind(g, store, &alloc::format!("{name}.w"))?;
    let b = bind(g, store, &alloc::format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// Squeeze-and-excite recalibration: pool -> FC(C/r) -> relu -> FC(C) ->
/// sigmoid -> channel-wise scale.
pub fn register_se(
    store: &mut ParamStore,
    name: &str,
    c: usize,
    reduction: usize,
    rng: &mut impl Rng,
) {
    debug_assert_eq!(c % reduction, 0, "reduction ratio must divide channels");
    register_linear(store, &alloc::format!("{name}.fc1"), c / reduction, c, rng);
    register_linear(store, &alloc::format!("{name}.fc2"), c, c / reduction, rng);
}

pub fn se_scale(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let gate = se_gate(g, store, name, x)?;
    g.mul(x, gate)
}

/// The [C,1,1] gate alone, for tests that need to inspect or bypass it.
pub fn se_gate(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let c = g.value(x).shape()[0];
    let pooled = g.global_avg_pool(x)?;
    let row = g.reshape(pooled, &[1, c])?;
    let h = linear(g, store, &alloc::format!("{name}.fc1"), row)?;
    let h = g.relu(h);
    let h = linear(g, store, &alloc::format!("{name}.fc2"), h)?;
    let gate = g.sigmoid(h);
    g.reshape(gate, &[c, 1, 1])
}

/// Flatten a [C,H,W] map into [H*W, C] token rows.
pub fn map_to_tokens(g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
    let s = g.value(x).shape().to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.permute(flat, &[1, 0])
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(
    g: &mut Graph,
    x: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId, GraphError> {
    let s = g.value(x).shape().to_vec();
    let chans = g.permute(x, &[1, 0])?;
    g.reshape(chans, &[s[1], h, w])
}
