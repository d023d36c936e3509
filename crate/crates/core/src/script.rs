//! JSON manipulation scripts: ordered flow edits applied to a bottleneck.
//!
//! A script is a JSON array whose entries are either a flow spec object
//! tagged by `type` or a nested array, e.g.
//!
//! ```json
//! [{"type": "stretch", "axis": "y", "a": -0.5, "b": 0.5},
//!  [{"type": "twist", "split_y": 0.0, "alpha": 30}]]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::{compose_flows, relative_flow, reflect_merge_flow, stretch_flow, twist_flow, Axis, RigidPose, Side, StretchSpec, TwistSpec};
use crate::image::ImagePlane;
use crate::net::TbnModel;
use crate::scalar::Real;
use crate::volume::{resample, Dims, FeatureVolume, FlowField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FlowSpec {
    /// Moves content from the canonical frame into `pose`.
    Rigid(RigidPose),
    Stretch(StretchSpec),
    Twist(TwistSpec),
    Reflect { axis: Axis, keep: Side },
}

impl FlowSpec {
    pub fn flow<T: Real>(&self, dims: Dims) -> Result<FlowField<T>> {
        match self {
            FlowSpec::Rigid(pose) => {
                if !pose.is_finite() {
                    return Err(invalid!("non-finite rigid pose {pose:?}"));
                }
                Ok(relative_flow(dims, &RigidPose::identity(), pose))
            }
            FlowSpec::Stretch(spec) => stretch_flow(dims, spec),
            FlowSpec::Twist(spec) => twist_flow(dims, spec),
            FlowSpec::Reflect { axis, keep } => reflect_merge_flow(dims, *axis, *keep),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Flow(FlowSpec),
    Group(Vec<ScriptEntry>),
}

impl From<FlowSpec> for ScriptEntry {
    fn from(spec: FlowSpec) -> Self {
        ScriptEntry::Flow(spec)
    }
}

pub type Script = Vec<ScriptEntry>;

pub fn parse_script(json: &str) -> Result<Script> {
    Ok(serde_json::from_str(json)?)
}

pub fn script_to_json(script: &[ScriptEntry]) -> String {
    serde_json::to_string(script).expect("script serializes")
}

/// Single flow equivalent to applying the entries in order, nested groups
/// composed first. An empty script is the identity flow.
pub fn script_flow<T: Real>(dims: Dims, script: &[ScriptEntry]) -> Result<FlowField<T>> {
    let mut acc = FlowField::identity(dims);
    for entry in script {
        let next = match entry {
            ScriptEntry::Flow(spec) => spec.flow(dims)?,
            ScriptEntry::Group(inner) => script_flow(dims, inner)?,
        };
        acc = compose_flows(&acc, &next);
    }
    Ok(acc)
}

/// Script flow followed by the move from the canonical frame into `view`.
pub fn view_flow<T: Real>(dims: Dims, script: &[ScriptEntry], view: &RigidPose) -> Result<FlowField<T>> {
    if !view.is_finite() {
        return Err(invalid!("non-finite view pose {view:?}"));
    }
    let edits = script_flow(dims, script)?;
    Ok(compose_flows(&edits, &relative_flow(dims, &RigidPose::identity(), view)))
}

/// Resamples `base` once by the scripted view flow.
pub fn apply_script<T: Real>(base: &FeatureVolume<T>, script: &[ScriptEntry], view: &RigidPose) -> Result<FeatureVolume<T>> {
    resample(base, &view_flow(base.dims(), script, view)?)
}

/// Decoded RGB plus mask image of the scripted bottleneck.
pub fn decode_scripted<T: Real>(
    model: &TbnModel<T>,
    base: &FeatureVolume<T>,
    script: &[ScriptEntry],
    view: &RigidPose,
) -> Result<ImagePlane<T>> {
    model.decode_image(&apply_script(base, script, view)?)
}
