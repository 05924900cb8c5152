//! Associative representation of the coupled two-chain recurrence.

use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Straight,
    Swapped,
}

impl Parity {
    fn flip(self, other: Parity) -> Parity {
        if self == other {
            Parity::Straight
        } else {
            Parity::Swapped
        }
    }
}

/// Affine map on the joint state `(r, t)` of one `(channel, state)` lane.
///
/// `Straight`: `(r, t) -> (scale_r * r + offset_r, scale_t * t + offset_t)`.
/// `Swapped`:  `(r, t) -> (scale_r * t + offset_r, scale_t * r + offset_t)`,
/// i.e. the transition matrix `[[0, scale_r], [scale_t, 0]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePairElement<T> {
    pub parity: Parity,
    pub scale_r: T,
    pub scale_t: T,
    pub offset_r: T,
    pub offset_t: T,
}

impl<T: Scalar> AffinePairElement<T> {
    pub fn identity() -> Self {
        Self {
            parity: Parity::Straight,
            scale_r: T::one(),
            scale_t: T::one(),
            offset_r: T::zero(),
            offset_t: T::zero(),
        }
    }

    pub fn apply(&self, (r, t): (T, T)) -> (T, T) {
        let (src_r, src_t) = match self.parity {
            Parity::Straight => (r, t),
            Parity::Swapped => (t, r),
        };
        (
            self.scale_r * src_r + self.offset_r,
            self.scale_t * src_t + self.offset_t,
        )
    }

    /// The map "apply `self`, then `later`".
    pub fn then(self, later: Self) -> Self {
        // `later` reads its r output from the first component of its source
        // order; route that through `self`.
        let (from_r, from_t) = match later.parity {
            Parity::Straight => ((self.scale_r, self.offset_r), (self.scale_t, self.offset_t)),
            Parity::Swapped => ((self.scale_t, self.offset_t), (self.scale_r, self.offset_r)),
        };
        Self {
            parity: self.parity.flip(later.parity),
            scale_r: later.scale_r * from_r.0,
            scale_t: later.scale_t * from_t.0,
            offset_r: later.scale_r * from_r.1 + later.offset_r,
            offset_t: later.scale_t * from_t.1 + later.offset_t,
        }
    }
}

/// In-place inclusive prefix composition (`xs[k] <- xs[0] then ... then xs[k]`)
/// with a work-efficient up-sweep / down-sweep over a power-of-two padding.
pub fn inclusive_scan<T: Scalar>(xs: &mut [AffinePairElement<T>]) {
    let n = xs.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<AffinePairElement<T>> = Vec::with_capacity(size);
    tree.extend_from_slice(xs);
    tree.resize(size, AffinePairElement::identity());

    let mut stride = 1;
    while stride < size {
        let step = stride * 2;
        for right in (step - 1..size).step_by(step) {
            tree[right] = tree[right - stride].then(tree[right]);
        }
        stride = step;
    }
    tree[size - 1] = AffinePairElement::identity();
    while stride > 1 {
        let half = stride / 2;
        for right in (stride - 1..size).step_by(stride) {
            let left = right - half;
            let left_sum = tree[left];
            tree[left] = tree[right];
            tree[right] = tree[right].then(left_sum);
        }
        stride = half;
    }
    // exclusive prefix -> inclusive
    for (x, prefix) in xs.iter_mut().zip(&tree) {
        *x = prefix.then(*x);
    }
}
