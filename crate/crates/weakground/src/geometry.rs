//! Axis-aligned 3D boxes, IoU, and the spatial-relation library used by the
//! query generator, the relation classifier head, and the evaluation metrics.
//!
//! Directional relations live in a fixed global frame: +x is "right",
//! +y is "behind" (so smaller y is "in front of"), +z is "above". Each one
//! compares box centers along its axis with a margin so detection jitter
//! cannot flip a relation.

use serde::{Deserialize, Serialize};

/// Errors raised by geometric contract violations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("box size components must be strictly positive, got {0:?}")]
    NonPositiveSize([f64; 3]),
    #[error("{0}")]
    Contract(String),
}

/// Axis-aligned box given by center and full edge lengths, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeomError> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(GeomError::NonPositiveSize(size));
        }
        Ok(Box3 { center, size })
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn min_corner(&self) -> [f64; 3] {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    /// Euclidean distance between box centers.
    pub fn center_distance(&self, other: &Box3) -> f64 {
        let d: f64 = self
            .center
            .iter()
            .zip(&other.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d.sqrt()
    }
}

/// Intersection volume over union volume of two axis-aligned boxes.
pub fn iou_3d(a: &Box3, b: &Box3) -> f64 {
    let amin = a.min_corner();
    let amax = a.max_corner();
    let bmin = b.min_corner();
    let bmax = b.max_corner();
    let mut inter = 1.0;
    for axis in 0..3 {
        let lo = amin[axis].max(bmin[axis]);
        let hi = amax[axis].min(bmax[axis]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// The fixed, ordered relation library.
///
/// The set is a deliberate stand-in chosen to cover per-axis direction,
/// proximity, and extremal-distance relations; its order is bit-stable and
/// indexes the relation classifier's output logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
    Above,
    Below,
    Closest,
    Farthest,
    NextTo,
}

/// All relations in library order.
pub const RELATION_LIBRARY: [Relation; 9] = [
    Relation::Left,
    Relation::Right,
    Relation::Front,
    Relation::Behind,
    Relation::Above,
    Relation::Below,
    Relation::Closest,
    Relation::Farthest,
    Relation::NextTo,
];

impl Relation {
    /// Index into [`RELATION_LIBRARY`]; also the relation-head class index.
    pub fn index(self) -> usize {
        RELATION_LIBRARY.iter().position(|&r| r == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Relation> {
        RELATION_LIBRARY.get(i).copied()
    }

    /// Canonical identifier used in dataset files and reports.
    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Closest => "closest",
            Relation::Farthest => "farthest",
            Relation::NextTo => "next_to",
        }
    }

    /// Surface phrases that may realize this relation between two noun
    /// phrases; the first entry is the canonical one.
    pub fn surface_phrases(self) -> &'static [&'static str] {
        match self {
            Relation::Left => &["to the left of", "left of", "on the left side of"],
            Relation::Right => &["to the right of", "right of", "on the right side of"],
            Relation::Front => &["in front of", "ahead of", "forward of"],
            Relation::Behind => &["behind", "in back of", "at the back of"],
            Relation::Above => &["above", "over", "higher than"],
            Relation::Below => &["below", "under", "beneath"],
            Relation::Closest => &["closest to", "nearest to", "nearest"],
            Relation::Farthest => &["farthest from", "furthest from", "most distant from"],
            Relation::NextTo => &["next to", "beside", "adjacent to"],
        }
    }

    /// The relation with swapped operands, when one exists in the library.
    pub fn converse(self) -> Option<Relation> {
        match self {
            Relation::Left => Some(Relation::Right),
            Relation::Right => Some(Relation::Left),
            Relation::Front => Some(Relation::Behind),
            Relation::Behind => Some(Relation::Front),
            Relation::Above => Some(Relation::Below),
            Relation::Below => Some(Relation::Above),
            _ => None,
        }
    }
}

/// Margins for relation predicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    /// Minimum signed center difference for directional relations, meters.
    pub margin: f64,
    /// Maximum center distance for `next_to`, meters.
    pub proximity: f64,
}

impl Default for RelationParams {
    fn default() -> Self {
        RelationParams {
            margin: 0.05,
            proximity: 1.0,
        }
    }
}

/// Whether `rel(subject, anchor)` holds.
///
/// `context` is the comparison set for `closest`/`farthest` — the candidate
/// boxes the subject competes against (it must contain the subject and must
/// not contain the anchor, which would trivially win at distance zero).
pub fn relation_holds(
    rel: Relation,
    subject: &Box3,
    anchor: &Box3,
    context: &[Box3],
    params: &RelationParams,
) -> Result<bool, GeomError> {
    let d = params.margin;
    let diff = |axis: usize| subject.center[axis] - anchor.center[axis];
    match rel {
        Relation::Left => Ok(-diff(0) > d),
        Relation::Right => Ok(diff(0) > d),
        Relation::Front => Ok(-diff(1) > d),
        Relation::Behind => Ok(diff(1) > d),
        Relation::Above => Ok(diff(2) > d),
        Relation::Below => Ok(-diff(2) > d),
        Relation::NextTo => Ok(subject.center_distance(anchor) < params.proximity),
        Relation::Closest | Relation::Farthest => {
            if context.is_empty() {
                return Err(GeomError::Contract(format!(
                    "{} requires a nonempty context",
                    rel.name()
                )));
            }
            let own = subject.center_distance(anchor);
            let strictly_beats = |other: &Box3| {
                let dist = other.center_distance(anchor);
                match rel {
                    Relation::Closest => own < dist,
                    _ => own > dist,
                }
            };
            // The subject must strictly beat every *other* context box.
            Ok(context
                .iter()
                .all(|b| b == subject || strictly_beats(b)))
        }
    }
}

/// Every library relation that holds for `(subject, anchor)`, in library
/// order.
pub fn classify_relation(
    subject: &Box3,
    anchor: &Box3,
    context: &[Box3],
    params: &RelationParams,
) -> Vec<Relation> {
    RELATION_LIBRARY
        .iter()
        .copied()
        .filter(|&r| relation_holds(r, subject, anchor, context, params).unwrap_or(false))
        .collect()
}
