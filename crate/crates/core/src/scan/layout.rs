use serde::{Deserialize, Serialize};

/// The four 2-D traversal orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    RowFwd,
    ColFwd,
    RowRev,
    ColRev,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowFwd,
        Direction::ColFwd,
        Direction::RowRev,
        Direction::ColRev,
    ];
}

/// Visiting order of the `H * W` row-major pixel indices for one direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionalLayout {
    pub direction: Direction,
    pub pixel_order: Vec<usize>,
}

impl DirectionalLayout {
    pub fn new(direction: Direction, h: usize, w: usize) -> Self {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w)
            .flat_map(|x| (0..h).map(move |y| y * w + x))
            .collect();
        let pixel_order = match direction {
            Direction::RowFwd => row,
            Direction::ColFwd => col,
            Direction::RowRev => row.into_iter().rev().collect(),
            Direction::ColRev => col.into_iter().rev().collect(),
        };
        Self {
            direction,
            pixel_order,
        }
    }

    pub fn all(h: usize, w: usize) -> Vec<Self> {
        Direction::ALL.iter().map(|&d| Self::new(d, h, w)).collect()
    }

    pub fn len(&self) -> usize {
        self.pixel_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_order.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn column_order_is_transpose_enumeration() {
        let l = DirectionalLayout::new(Direction::ColFwd, 2, 2);
        // (0,0), (1,0), (0,1), (1,1)
        assert_eq!(l.pixel_order, [0, 2, 1, 3]);
    }

    proptest! {
        #[test]
        fn orders_are_bijections_and_reverses(h in 1usize..9, w in 1usize..9) {
            let all = DirectionalLayout::all(h, w);
            for l in &all {
                let mut sorted = l.pixel_order.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..h * w).collect::<Vec<_>>());
            }
            let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
            prop_assert_eq!(&all[2].pixel_order, &rev(&all[0].pixel_order));
            prop_assert_eq!(&all[3].pixel_order, &rev(&all[1].pixel_order));
        }
    }
}
