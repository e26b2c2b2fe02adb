//! Differentiation engine for neural scalar fields.
//!
//! Two derivative flavors are nested here:
//!
//! * reverse mode over a recorded tape gives gradients of a scalar loss
//!   with respect to every entry of a flat [`ParameterStore`];
//! * forward-mode spatial jets ([`Jet`]) ride along every tape value, so
//!   the spatial gradient of a field is itself a tape quantity and can be
//!   differentiated again with respect to the parameters.
//!
//! The combination (forward-over-reverse) is what the Eikonal and surface
//! normal terms need: both depend on the spatial gradient of the field and
//! must be optimized over network weights.

mod error;
mod jet;
mod params;
mod tape;

pub use error::AdError;
pub use jet::{sigmoid, softplus, Jet};
pub use params::{ParamRef, ParameterStore};
pub use tape::{NodeId, Tape, TapeMark, Unary};

/// A differentiable scalar: its value, its spatial partials, and its tape
/// location for further composition and reverse passes.
#[derive(Clone, Copy, Debug)]
pub struct DualTriple {
    pub value: f64,
    pub spatial: [f64; 3],
    pub node: NodeId,
}

/// Result of evaluating a field and its spatial gradient at one point.
#[derive(Clone, Copy, Debug)]
pub struct SpatialEval {
    /// The field value f(x).
    pub value: DualTriple,
    /// Gradient components as tape nodes: backward through any function of
    /// them yields mixed second derivatives d^2 f / dtheta dx.
    pub grad: [DualTriple; 3],
    /// `R x 3` node holding all three gradient components.
    pub grad_node: NodeId,
}

/// Evaluate a tape-recordable field at `x` with seeded spatial derivatives.
///
/// `field` receives the seeded `1 x 3` input node and must return a `1 x 1`
/// scalar node recorded on the same tape.
pub fn spatial_eval<F>(
    tape: &mut Tape,
    params: &ParameterStore,
    x: [f64; 3],
    field: F,
) -> SpatialEval
where
    F: FnOnce(&mut Tape, &ParameterStore, NodeId) -> NodeId,
{
    let pt = tape.constant(1, 3, &x);
    let seeded = tape.seed_spatial(pt);
    let f = field(tape, params, seeded);
    assert_eq!(tape.shape(f), (1, 1), "field must produce a scalar node");
    let g = tape.extract_spatial(f);
    let fj = tape.jet_at(f, 0, 0);
    let value = DualTriple {
        value: fj.v,
        spatial: fj.d,
        node: f,
    };
    let mut grad = [DualTriple {
        value: 0.0,
        spatial: [0.0; 3],
        node: g,
    }; 3];
    for (k, item) in grad.iter_mut().enumerate() {
        let comp = tape.slice_cols(g, k, 1);
        item.value = tape.values(comp)[0];
        item.node = comp;
    }
    SpatialEval {
        value,
        grad,
        grad_node: g,
    }
}
