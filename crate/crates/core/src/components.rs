//! 8-connected component labeling (two-pass, union-find).
//!
//! Used by both the lesion-wise F1 metric and object-level detection so the
//! two always agree on what a "component" is.

use crate::grid::BinaryMask;

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Keep the smaller label as root so roots follow scan order.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Per-pixel component labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    /// `Some(k)` for foreground pixels, where `k` indexes into `members`.
    pub labels: Vec<Option<usize>>,
    /// Row-major pixel indices of each component. Components are ordered by
    /// their smallest pixel index, and members are sorted ascending.
    pub members: Vec<Vec<usize>>,
}

impl Labeling {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Labels the 8-connected foreground components of `mask`.
pub fn label(mask: &BinaryMask) -> Labeling {
    let g = mask.geometry();
    let (w, h) = (g.width(), g.height());
    let px = mask.pixels();
    let mut provisional = vec![usize::MAX; px.len()];
    let mut sets = DisjointSet::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !px[i] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut neighbours = [usize::MAX; 4];
            if x > 0 {
                neighbours[0] = provisional[i - 1];
            }
            if y > 0 {
                let up = i - w;
                if x > 0 {
                    neighbours[1] = provisional[up - 1];
                }
                neighbours[2] = provisional[up];
                if x + 1 < w {
                    neighbours[3] = provisional[up + 1];
                }
            }
            let mut current = usize::MAX;
            for &n in neighbours.iter().filter(|&&n| n != usize::MAX) {
                if current == usize::MAX {
                    current = n;
                } else {
                    sets.union(current, n);
                }
            }
            if current == usize::MAX {
                current = sets.make();
            }
            provisional[i] = current;
        }
    }

    let mut root_to_label = vec![usize::MAX; sets.parent.len()];
    let mut labels = vec![None; px.len()];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..px.len() {
        if provisional[i] == usize::MAX {
            continue;
        }
        let root = sets.find(provisional[i]);
        if root_to_label[root] == usize::MAX {
            root_to_label[root] = members.len();
            members.push(Vec::new());
        }
        let k = root_to_label[root];
        labels[i] = Some(k);
        members[k].push(i);
    }
    Labeling { labels, members }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn mask(rows: &[&str]) -> BinaryMask {
        let g = Geometry::new(rows[0].len(), rows.len(), 1.0).unwrap();
        BinaryMask::from_fn(g, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(label(&mask(&["...", "..."])).is_empty());
    }

    #[test]
    fn diagonal_pixels_join() {
        let l = label(&mask(&["#.", ".#"]));
        assert_eq!(l.members, vec![vec![0, 3]]);
    }

    #[test]
    fn u_shape_merges_late() {
        // Two arms only connect in the last row.
        let l = label(&mask(&["#.#", "#.#", "###"]));
        assert_eq!(l.len(), 1);
        assert_eq!(l.members[0].len(), 7);
    }

    #[test]
    fn components_ordered_by_first_pixel() {
        let l = label(&mask(&["..#", "#..", "#.."]));
        assert_eq!(l.members, vec![vec![2], vec![3, 6]]);
        assert_eq!(l.labels[2], Some(0));
        assert_eq!(l.labels[6], Some(1));
    }

    #[test]
    fn anti_diagonal_joins() {
        let l = label(&mask(&[".#", "#."]));
        assert_eq!(l.len(), 1);
    }
}
