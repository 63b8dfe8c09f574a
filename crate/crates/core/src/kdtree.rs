//! Balanced k-d tree over a fixed point set, in 3D or in the x,y plane.
//!
//! Results are exact. Equal distances are ordered by insertion index so
//! every query is deterministic and comparable against a brute-force sort.

use std::collections::BinaryHeap;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn count(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }
}

impl TryFrom<usize> for Dims {
    type Error = Error;
    fn try_from(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Dims::Two),
            3 => Ok(Dims::Three),
            _ => Err(Error::InvalidArgument(format!("k-d index dimensionality must be 2 or 3, got {d}"))),
        }
    }
}

/// One neighbour: index into the indexed cloud and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
struct Node {
    lo: u32,
    hi: u32,
    axis: u8,
    split: f64,
    // children are implicit: left = 2i+1, right = 2i+2 in `nodes`; leaf when axis == u8::MAX
}

#[derive(Debug, Clone)]
pub struct KdIndex {
    dims: Dims,
    coords: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<Option<Node>>,
}

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

pub fn build_kdindex(cloud: &PointCloud, dims: Dims) -> Result<KdIndex> {
    KdIndex::build(cloud.points(), dims)
}

impl KdIndex {
    pub fn build(points: &[Point], dims: Dims) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("cannot index an empty cloud"));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many points for the k-d index".into()));
        }
        let coords: Vec<[f64; 3]> = points
            .iter()
            .map(|p| match dims {
                Dims::Two => [p.x, p.y, 0.0],
                Dims::Three => [p.x, p.y, p.z],
            })
            .collect();
        let mut index = KdIndex {
            dims,
            coords,
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, 0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, slot: usize, lo: usize, hi: usize) {
        if self.nodes.len() <= slot {
            self.nodes.resize(slot + 1, None);
        }
        if hi - lo <= LEAF_SIZE {
            self.nodes[slot] = Some(Node {
                lo: lo as u32,
                hi: hi as u32,
                axis: u8::MAX,
                split: 0.0,
            });
            return;
        }
        let axis = self.widest_axis(lo, hi);
        let mid = (lo + hi) / 2;
        let coords = &self.coords;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            coords[a as usize][axis]
                .total_cmp(&coords[b as usize][axis])
                .then(a.cmp(&b))
        });
        let split = self.coords[self.order[mid] as usize][axis];
        self.nodes[slot] = Some(Node {
            lo: lo as u32,
            hi: hi as u32,
            axis: axis as u8,
            split,
        });
        self.build_node(2 * slot + 1, lo, mid);
        self.build_node(2 * slot + 2, mid, hi);
    }

    fn widest_axis(&self, lo: usize, hi: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for axis in 0..self.dims.count() {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[lo..hi] {
                let v = self.coords[i as usize][axis];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mx - mn > best.1 {
                best = (axis, mx - mn);
            }
        }
        best.0
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn query_coords(&self, q: &Point) -> [f64; 3] {
        match self.dims {
            Dims::Two => [q.x, q.y, 0.0],
            Dims::Three => [q.x, q.y, q.z],
        }
    }

    fn dist2(&self, a: &[f64; 3], i: usize) -> f64 {
        let b = &self.coords[i];
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    }

    /// The `k` nearest indexed points, ascending by distance then index.
    pub fn knn(&self, query: &Point, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds index size {}",
                self.len()
            )));
        }
        let q = self.query_coords(query);
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, &q, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.d2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, query: &Point) -> Neighbor {
        self.knn(query, 1).expect("index is never empty")[0]
    }

    fn knn_node(&self, slot: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        let Some(node) = self.nodes.get(slot).and_then(Option::as_ref) else {
            return;
        };
        if node.axis == u8::MAX {
            for &i in &self.order[node.lo as usize..node.hi as usize] {
                let cand = Candidate {
                    d2: self.dist2(q, i as usize),
                    index: i as usize,
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(cand);
                }
            }
            return;
        }
        let diff = q[node.axis as usize] - node.split;
        let (near, far) = if diff < 0.0 {
            (2 * slot + 1, 2 * slot + 2)
        } else {
            (2 * slot + 2, 2 * slot + 1)
        };
        self.knn_node(near, q, k, heap);
        // `<=` keeps equal-distance candidates with lower indices reachable.
        if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
            self.knn_node(far, q, k, heap);
        }
    }

    /// Indices of all points within `radius` (inclusive), ascending by index.
    pub fn within_radius(&self, query: &Point, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_visit(query, radius, |i| out.push(i));
        out.sort_unstable();
        out
    }

    /// Number of points within `radius` (inclusive).
    pub fn count_within_radius(&self, query: &Point, radius: f64) -> usize {
        let mut n = 0;
        self.radius_visit(query, radius, |_| n += 1);
        n
    }

    fn radius_visit(&self, query: &Point, radius: f64, mut f: impl FnMut(usize)) {
        let q = self.query_coords(query);
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(slot) = stack.pop() {
            let Some(node) = self.nodes.get(slot).and_then(Option::as_ref) else {
                continue;
            };
            if node.axis == u8::MAX {
                for &i in &self.order[node.lo as usize..node.hi as usize] {
                    if self.dist2(&q, i as usize) <= r2 {
                        f(i as usize);
                    }
                }
                continue;
            }
            let diff = q[node.axis as usize] - node.split;
            if diff <= radius {
                stack.push(2 * slot + 1);
            }
            if diff >= -radius {
                stack.push(2 * slot + 2);
            }
        }
    }
}
