//! Realized environments: grid cells, Cartesian planes and road graphs.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    /// OSM id or inline node name.
    pub key: String,
    pub pos: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Undirected graph; adjacency lists are sorted by neighbor index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Graph {
    /// Builds a graph, dropping self-loops and duplicate edges (the first
    /// occurrence is kept).
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>) -> Self {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        for e in edges {
            let key = (e.a.min(e.b), e.a.max(e.b));
            if e.a != e.b && seen.insert(key) {
                kept.push(e);
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (i, e) in kept.iter().enumerate() {
            adjacency[e.a].push((e.b, i));
            adjacency[e.b].push((e.a, i));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Graph { nodes, edges: kept, adjacency }
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// `(neighbor, edge)` pairs of `node`.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    /// Nodes where three or more roads meet.
    pub fn intersections(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&n| self.degree(n) >= 3).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Space {
    Grid { width: i64, height: i64, wrap: bool },
    Cartesian { x_min: f64, x_max: f64, y_min: f64, y_max: f64 },
    Graph(Graph),
}

impl Space {
    /// Euclidean distance; toroidal on wrapped grids.
    pub fn distance(&self, a: Point, b: Point) -> f64 {
        let mut dx = (a.x - b.x).abs();
        let mut dy = (a.y - b.y).abs();
        if let Space::Grid { width, height, wrap: true } = *self {
            dx = dx.min(width as f64 - dx);
            dy = dy.min(height as f64 - dy);
        }
        dx.hypot(dy)
    }

    /// Whether `p` is a legal position: an in-bounds cell, a point inside
    /// the plane, or the location of a graph node.
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Space::Grid { width, height, .. } => {
                p.x.fract() == 0.0
                    && p.y.fract() == 0.0
                    && (0.0..*width as f64).contains(&p.x)
                    && (0.0..*height as f64).contains(&p.y)
            }
            Space::Cartesian { x_min, x_max, y_min, y_max } => {
                (*x_min..=*x_max).contains(&p.x) && (*y_min..=*y_max).contains(&p.y)
            }
            Space::Graph(g) => g.nodes.iter().any(|n| n.pos == p),
        }
    }

    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> (Point, Option<usize>) {
        match self {
            Space::Grid { width, height, .. } => {
                let x = rng.random_range(0..*width);
                let y = rng.random_range(0..*height);
                (Point::new(x as f64, y as f64), None)
            }
            Space::Cartesian { x_min, x_max, y_min, y_max } => {
                let x = x_min + rng.random::<f64>() * (x_max - x_min);
                let y = y_min + rng.random::<f64>() * (y_max - y_min);
                (Point::new(x, y), None)
            }
            Space::Graph(g) => {
                if g.nodes.is_empty() {
                    return (Point::new(0.0, 0.0), None);
                }
                let n = rng.random_range(0..g.nodes.len());
                (g.nodes[n].pos, Some(n))
            }
        }
    }

    /// One random-walk move on a grid or plane. Grids draw one of the nine
    /// cells of the Moore neighborhood (staying put included) and scale it by
    /// the rounded step; planes draw a heading in `[0, 2π)`. Positions are
    /// wrapped on toroidal grids and clamped otherwise. Graph movement is
    /// handled by the vehicle model.
    pub fn random_walk<R: Rng + ?Sized>(&self, from: Point, step: f64, rng: &mut R) -> Point {
        match *self {
            Space::Grid { width, height, wrap } => {
                let k = rng.random_range(0..9);
                let (dx, dy) = ((k % 3) as i64 - 1, (k / 3) as i64 - 1);
                let s = step.round() as i64;
                let x = from.x as i64 + dx * s;
                let y = from.y as i64 + dy * s;
                let (x, y) = if wrap {
                    (x.rem_euclid(width), y.rem_euclid(height))
                } else {
                    (x.clamp(0, width - 1), y.clamp(0, height - 1))
                };
                Point::new(x as f64, y as f64)
            }
            Space::Cartesian { x_min, x_max, y_min, y_max } => {
                let heading = rng.random::<f64>() * TAU;
                let x = (from.x + step * heading.cos()).clamp(x_min, x_max);
                let y = (from.y + step * heading.sin()).clamp(y_min, y_max);
                Point::new(x, y)
            }
            Space::Graph(_) => from,
        }
    }
}

/// Approach direction of a vehicle arriving at `at` from `from`, classified
/// by the dominant axis of the bearing (north is increasing y).
pub fn approach_direction(at: Point, from: Point) -> &'static str {
    let dx = from.x - at.x;
    let dy = from.y - at.y;
    if dy.abs() >= dx.abs() {
        if dy > 0.0 {
            "north"
        } else {
            "south"
        }
    } else if dx > 0.0 {
        "east"
    } else {
        "west"
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn wrapped_grid_distance_uses_the_short_way_round() {
        let s = Space::Grid { width: 10, height: 10, wrap: true };
        assert_eq!(s.distance(Point::new(0.0, 0.0), Point::new(9.0, 0.0)), 1.0);
        let s = Space::Grid { width: 10, height: 10, wrap: false };
        assert_eq!(s.distance(Point::new(0.0, 0.0), Point::new(9.0, 0.0)), 9.0);
    }

    #[test]
    fn grid_walk_stays_in_the_moore_neighborhood() {
        let s = Space::Grid { width: 10, height: 10, wrap: true };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            let p = s.random_walk(Point::new(0.0, 0.0), 1.0, &mut rng);
            seen.insert((p.x as i64, p.y as i64));
        }
        let expected: BTreeSet<(i64, i64)> =
            [(0, 0), (1, 0), (9, 0), (0, 1), (0, 9), (1, 1), (9, 9), (1, 9), (9, 1)].into_iter().collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn zero_step_and_clamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Space::Grid { width: 5, height: 5, wrap: false };
        for _ in 0..50 {
            assert_eq!(g.random_walk(Point::new(2.0, 2.0), 0.0, &mut rng), Point::new(2.0, 2.0));
        }
        let c = Space::Cartesian { x_min: 0.0, x_max: 10.0, y_min: 0.0, y_max: 10.0 };
        for _ in 0..200 {
            assert!(c.contains(c.random_walk(Point::new(10.0, 10.0), 1.0, &mut rng)));
        }
    }

    #[test]
    fn graph_deduplicates_and_finds_intersections() {
        let node = |k: &str, x, y| GraphNode { key: k.into(), pos: Point::new(x, y) };
        let edge = |a, b| GraphEdge { a, b, length: 1.0 };
        let g = Graph::new(
            vec![node("c", 0.0, 0.0), node("n", 0.0, 1.0), node("e", 1.0, 0.0), node("s", 0.0, -1.0)],
            vec![edge(0, 1), edge(1, 0), edge(0, 2), edge(0, 3), edge(2, 2)],
        );
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.intersections(), vec![0]);
        assert_eq!(approach_direction(Point::new(0.0, 0.0), Point::new(0.0, 1.0)), "north");
        assert_eq!(approach_direction(Point::new(0.0, 0.0), Point::new(-2.0, 1.0)), "west");
    }
}
