use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::env::{StateView, Vec2};

/// Feature-map layout. `V2` extends `V1` with coordinate products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureVersion {
    V1,
    V2,
}

const V1_NAMES: [&str; 12] = [
    "pos_x", "pos_y", "goal_x", "goal_y", "o_x", "o_y", "pos_norm", "goal_norm", "d", "pos_angle", "goal_angle",
    "theta",
];

const V2_NAMES: [&str; 20] = [
    "pos_x", "pos_y", "goal_x", "goal_y", "o_x", "o_y", "pos_norm", "goal_norm", "d", "pos_angle", "goal_angle",
    "theta", "pos_x_ox", "pos_x_oy", "pos_y_ox", "pos_y_oy", "goal_x_ox", "goal_x_oy", "goal_y_ox", "goal_y_oy",
];

impl FeatureVersion {
    /// Length of the feature vector, constant entry included.
    pub fn dim(self) -> usize {
        self.names().len() + 1
    }

    /// Names of the non-constant entries, in layout order.
    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureVersion::V1 => &V1_NAMES,
            FeatureVersion::V2 => &V2_NAMES,
        }
    }

    pub fn const_index(self) -> usize {
        self.dim() - 1
    }

    pub fn index_of(self, name: &str) -> Option<usize> {
        let name = if name == "θ" { "theta" } else { name };
        self.names().iter().position(|n| *n == name)
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureVersion::V1 => "V1",
            FeatureVersion::V2 => "V2",
        }
    }
}

impl std::str::FromStr for FeatureVersion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "V1" | "v1" => Ok(FeatureVersion::V1),
            "V2" | "v2" => Ok(FeatureVersion::V2),
            other => Err(format!("unknown feature map `{other}`")),
        }
    }
}

/// `atan2(y, x)` in `(-π, π]`, with the zero vector mapped to 0.
pub fn angle(v: Vec2) -> f64 {
    if v[0] == 0.0 && v[1] == 0.0 {
        return 0.0;
    }
    let a = v[1].atan2(v[0]);
    if a == -PI {
        PI
    } else {
        a
    }
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

/// Writes `φ(s^i, o^{i,j})` into `out` (length `version.dim()`).
///
/// Layout: pos, goal, o, their norms, their angles, the V2 products
/// `(s_a · o_b)` for each state vector `s`, then the constant 1.
pub fn featurize_into(view: StateView, o: Vec2, version: FeatureVersion, out: &mut [f64]) {
    let (p, g) = (view.pos, view.goal);
    out[..12].copy_from_slice(&[
        p[0],
        p[1],
        g[0],
        g[1],
        o[0],
        o[1],
        norm(p),
        norm(g),
        norm(o),
        angle(p),
        angle(g),
        angle(o),
    ]);
    if version == FeatureVersion::V2 {
        out[12..20].copy_from_slice(&[
            p[0] * o[0],
            p[0] * o[1],
            p[1] * o[0],
            p[1] * o[1],
            g[0] * o[0],
            g[0] * o[1],
            g[1] * o[0],
            g[1] * o[1],
        ]);
    }
    out[version.const_index()] = 1.0;
}

pub fn featurize(view: StateView, o: Vec2, version: FeatureVersion) -> Vec<f64> {
    let mut out = vec![0.0; version.dim()];
    featurize_into(view, o, version, &mut out);
    out
}
