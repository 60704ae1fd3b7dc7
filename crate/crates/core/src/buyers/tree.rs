//! CART regression tree with variance-reduction splits.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 5,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct Builder<'a> {
    inputs: &'a [Vec<f64>],
    targets: &'a [f64],
    config: &'a TreeConfig,
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], config: &TreeConfig) -> Self {
        assert_eq!(inputs.len(), targets.len());
        assert!(!inputs.is_empty());
        let mut b = Builder {
            inputs,
            targets,
            config,
            nodes: Vec::new(),
        };
        let mut idx: Vec<usize> = (0..inputs.len()).collect();
        b.build(&mut idx, 0);
        RegressionTree { nodes: b.nodes }
    }

    pub fn predict(&self, input: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if input[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match &nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let me = self.nodes.len();
        let mean = idx.iter().map(|&i| self.targets[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf(mean));
        if depth >= self.config.max_depth || idx.len() < 2 * self.config.min_leaf {
            return me;
        }
        let Some(best) = self.best_split(idx) else {
            return me;
        };
        // partition in place: left = values <= threshold
        let mut split = 0;
        for k in 0..idx.len() {
            if self.inputs[idx[k]][best.feature] <= best.threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[me] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        me
    }

    fn best_split(&self, idx: &[usize]) -> Option<BestSplit> {
        let n = idx.len();
        let min_leaf = self.config.min_leaf.max(1);
        let total: f64 = idx.iter().map(|&i| self.targets[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.targets[i].powi(2)).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let n_features = self.inputs[idx[0]].len();
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        for f in 0..n_features {
            order.sort_by(|&a, &b| self.inputs[a][f].total_cmp(&self.inputs[b][f]));
            let (mut s, mut s2) = (0.0, 0.0);
            for k in 0..n - 1 {
                let y = self.targets[order[k]];
                s += y;
                s2 += y * y;
                let nl = k + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (v, vnext) = (self.inputs[order[k]][f], self.inputs[order[k + 1]][f]);
                if v == vnext {
                    continue;
                }
                let sse_l = s2 - s * s / nl as f64;
                let (sr, sr2) = (total - s, total_sq - s2);
                let sse_r = sr2 - sr * sr / nr as f64;
                let gain = parent_sse - sse_l - sse_r;
                // strict comparison keeps the lowest feature index on ties
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold: 0.5 * (v + vnext),
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_is_one_leaf() {
        let t = RegressionTree::fit(&[vec![0.3, 1.0]], &[2.5], &TreeConfig::default());
        assert_eq!(t.predict(&[-10.0, 0.0]), 2.5);
        assert_eq!(t.predict(&[10.0, 1.0]), 2.5);
        assert_eq!(t.depth(), 0);
    }

    #[test]
    fn constant_targets_predict_constant() {
        let inputs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i % 2) as f64]).collect();
        let t = RegressionTree::fit(&inputs, &[1.25; 50], &TreeConfig::default());
        for x in [[-3.0, 0.0], [25.0, 1.0], [99.0, 0.0]] {
            assert_eq!(t.predict(&x), 1.25);
        }
    }

    #[test]
    fn depth_is_bounded_and_step_is_found() {
        let inputs: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| if x[0] < 0.5 { 0.0 } else { 1.0 }).collect();
        let t = RegressionTree::fit(&inputs, &targets, &TreeConfig::default());
        assert!(t.depth() <= 5);
        assert_eq!(t.predict(&[0.2]), 0.0);
        assert_eq!(t.predict(&[0.8]), 1.0);

        let smooth: Vec<f64> = inputs.iter().map(|x| x[0] * x[0]).collect();
        let t = RegressionTree::fit(&inputs, &smooth, &TreeConfig::default());
        assert!(t.depth() <= 5);
    }

    #[test]
    fn ties_split_on_lowest_feature() {
        // both features carry the same information
        let inputs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, i as f64]).collect();
        let targets: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let t = RegressionTree::fit(&inputs, &targets, &TreeConfig::default());
        match &t.nodes[0] {
            Node::Split { feature, .. } => assert_eq!(*feature, 0),
            Node::Leaf(_) => panic!("expected a split"),
        }
    }

    #[test]
    fn leaves_respect_min_size() {
        let inputs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let mut targets = vec![0.0; 12];
        targets[11] = 100.0;
        let t = RegressionTree::fit(&inputs, &targets, &TreeConfig::default());
        // an isolated outlier cannot get its own leaf
        assert!(t.predict(&[11.0]) < 100.0);
    }
}
