//! Second-order regression trees with exact greedy split search.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        /// Samples with `x[feature] < threshold` go left.
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        value: f64,
    },
}

impl Node {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            Node::Leaf { .. } => None,
            Node::Split {
                feature, left, right, ..
            } => [Some(*feature), left.max_feature(), right.max_feature()]
                .into_iter()
                .flatten()
                .max(),
        }
    }

    /// Whether every split references a feature below `dim`.
    pub fn fits_dim(&self, dim: usize) -> bool {
        self.max_feature().is_none_or(|f| f < dim)
    }
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
}

/// Row-major training matrix with per-feature orderings computed once.
pub(crate) struct Presorted<'a> {
    rows: &'a [Vec<f64>],
    /// For each feature, row indices sorted by that feature (ties by index).
    order: Vec<Vec<usize>>,
}

impl<'a> Presorted<'a> {
    pub fn new(rows: &'a [Vec<f64>], dim: usize) -> Self {
        let order = (0..dim)
            .map(|f| {
                let mut idx: Vec<usize> = (0..rows.len()).collect();
                idx.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { rows, order }
    }

    /// Fits one tree to gradients `g` and hessians `h`. Rows with `active[i]`
    /// false take no part.
    pub fn fit(&self, g: &[f64], h: &[f64], active: &[bool], p: &TreeParams) -> Node {
        let lists: Vec<Vec<usize>> = self
            .order
            .iter()
            .map(|o| o.iter().copied().filter(|&i| active[i]).collect())
            .collect();
        let mut left_mark = vec![false; self.rows.len()];
        self.build(lists, g, h, p, 0, &mut left_mark)
    }

    fn build(
        &self,
        lists: Vec<Vec<usize>>,
        g: &[f64],
        h: &[f64],
        p: &TreeParams,
        depth: usize,
        left_mark: &mut [bool],
    ) -> Node {
        let members = &lists[0];
        let g_sum: f64 = members.iter().map(|&i| g[i]).sum();
        let h_sum: f64 = members.iter().map(|&i| h[i]).sum();
        let leaf = Node::Leaf {
            value: -g_sum / (h_sum + p.lambda),
        };
        if depth >= p.max_depth || members.len() < 2 {
            return leaf;
        }

        let score = |gs: f64, hs: f64| gs * gs / (hs + p.lambda);
        let parent = score(g_sum, h_sum);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, list) in lists.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..list.len() - 1 {
                let i = list[w];
                gl += g[i];
                hl += h[i];
                let (x0, x1) = (self.rows[i][f], self.rows[list[w + 1]][f]);
                if x0 == x1 {
                    continue;
                }
                let (gr, hr) = (g_sum - gl, h_sum - hl);
                if hl < p.min_child_weight || hr < p.min_child_weight {
                    continue;
                }
                let gain = score(gl, hl) + score(gr, hr) - parent;
                if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                    let mid = x0 + (x1 - x0) / 2.0;
                    let threshold = if mid > x0 && mid <= x1 { mid } else { x1 };
                    best = Some((gain, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return leaf;
        };

        for &i in members {
            left_mark[i] = self.rows[i][feature] < threshold;
        }
        let (mut lefts, mut rights) = (Vec::with_capacity(lists.len()), Vec::with_capacity(lists.len()));
        for list in &lists {
            let (l, r): (Vec<usize>, Vec<usize>) = list.iter().partition(|&&i| left_mark[i]);
            lefts.push(l);
            rights.push(r);
        }
        drop(lists);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.build(lefts, g, h, p, depth + 1, left_mark)),
            right: Box::new(self.build(rights, g, h, p, depth + 1, left_mark)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_split_recovers_step() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        // gradient of squared error at prediction 0 for targets 1 (i<5) and 3
        let g: Vec<f64> = (0..10).map(|i| if i < 5 { -2.0 } else { -6.0 }).collect();
        let h = vec![2.0; 10];
        let p = TreeParams {
            max_depth: 3,
            min_child_weight: 1e-3,
            lambda: 0.0,
        };
        let tree = Presorted::new(&rows, 1).fit(&g, &h, &[true; 10], &p);
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.eval(&[2.0]), 1.0);
        assert_eq!(tree.eval(&[7.0]), 3.0);
        assert!(tree.fits_dim(1));
        assert!(!tree.fits_dim(0));
    }

    #[test]
    fn depth_limit_is_respected() {
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let g: Vec<f64> = (0..64).map(|i| ((i * 31 % 17) as f64) - 8.0).collect();
        let h = vec![1.0; 64];
        let p = TreeParams {
            max_depth: 2,
            min_child_weight: 1e-3,
            lambda: 1.0,
        };
        let tree = Presorted::new(&rows, 2).fit(&g, &h, &[true; 64], &p);
        assert!(tree.depth() <= 2);
        assert!(tree.leaves() <= 4);
    }
}
