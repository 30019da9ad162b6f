//! Arena quadtree over 2-D embedding points for Barnes-Hut repulsion.
//!
//! Nodes live in a flat `Vec` and leaf membership is a linked list threaded
//! through a parallel per-point array, so rebuilding every iteration does not
//! allocate. Cells are square; an internal node is summarized by its center of
//! mass when `cell_width / distance < theta`.

const NIL: u32 = u32::MAX;
/// Coincident (or pathologically close) points stop subdividing here and
/// share a bucket leaf instead.
const MAX_DEPTH: u32 = 48;
/// Leaf capacity. Points in a reached leaf are always summed exactly, so a
/// larger bucket trades a shallower tree for more exact near-field terms;
/// the summarization (opening) criterion for internal cells is unaffected.
const BUCKET: u32 = 8;

#[derive(Clone, Copy)]
struct Node {
    cx: f64,
    cy: f64,
    /// Half the cell's side length.
    half: f64,
    comx: f64,
    comy: f64,
    mass: u32,
    /// Index of the first of four consecutive children; NIL marks a leaf.
    children: u32,
    /// Head of the leaf's point list, through `QuadTree::next`.
    head: u32,
}

impl Node {
    fn leaf(cx: f64, cy: f64, half: f64) -> Self {
        Node {
            cx,
            cy,
            half,
            comx: 0.0,
            comy: 0.0,
            mass: 0,
            children: NIL,
            head: NIL,
        }
    }
}

#[derive(Default)]
pub struct QuadTree {
    nodes: Vec<Node>,
    next: Vec<u32>,
}

impl QuadTree {
    pub fn new() -> Self {
        QuadTree::default()
    }

    /// Rebuilds the tree over `y = [x0, y0, x1, y1, ...]`, reusing storage.
    pub fn build(&mut self, y: &[f64]) {
        let n = y.len() / 2;
        self.nodes.clear();
        self.next.clear();
        self.next.resize(n, NIL);

        let mut minx = f64::INFINITY;
        let mut maxx = f64::NEG_INFINITY;
        let mut miny = f64::INFINITY;
        let mut maxy = f64::NEG_INFINITY;
        for i in 0..n {
            minx = minx.min(y[2 * i]);
            maxx = maxx.max(y[2 * i]);
            miny = miny.min(y[2 * i + 1]);
            maxy = maxy.max(y[2 * i + 1]);
        }
        if n == 0 {
            self.nodes.push(Node::leaf(0.0, 0.0, 0.5));
            return;
        }
        let cx = 0.5 * (minx + maxx);
        let cy = 0.5 * (miny + maxy);
        let half = (0.5 * (maxx - minx).max(maxy - miny)) * (1.0 + 1e-9) + 1e-12;
        self.nodes.push(Node::leaf(cx, cy, half));
        for i in 0..n {
            self.insert(0, i as u32, y[2 * i], y[2 * i + 1], 0, y);
        }
    }

    pub fn mass(&self) -> u32 {
        self.nodes.first().map_or(0, |r| r.mass)
    }

    pub fn center_of_mass(&self) -> (f64, f64) {
        self.nodes.first().map_or((0.0, 0.0), |r| (r.comx, r.comy))
    }

    fn insert(&mut self, node: u32, i: u32, px: f64, py: f64, depth: u32, y: &[f64]) {
        let ni = node as usize;
        {
            let nd = &mut self.nodes[ni];
            nd.mass += 1;
            let m = f64::from(nd.mass);
            nd.comx += (px - nd.comx) / m;
            nd.comy += (py - nd.comy) / m;
        }
        if self.nodes[ni].children != NIL {
            let c = self.child_for(node, px, py);
            self.insert(c, i, px, py, depth + 1, y);
            return;
        }
        // Leaf. `mass` already counts the newcomer, so appending keeps the
        // bucket within capacity as long as `mass` has not exceeded it.
        if self.nodes[ni].mass <= BUCKET || depth >= MAX_DEPTH {
            self.next[i as usize] = self.nodes[ni].head;
            self.nodes[ni].head = i;
            return;
        }
        // Occupied leaf: push residents one level down, then place the
        // newcomer. Mass and center of mass of this node already include the
        // residents, so only the children need updating, which re-inserting
        // from the child level does.
        let first = self.nodes[ni].head;
        self.nodes[ni].head = NIL;
        self.subdivide(node);
        let mut j = first;
        while j != NIL {
            let nj = self.next[j as usize];
            let (jx, jy) = (y[2 * j as usize], y[2 * j as usize + 1]);
            let c = self.child_for(node, jx, jy);
            self.insert(c, j, jx, jy, depth + 1, y);
            j = nj;
        }
        let c = self.child_for(node, px, py);
        self.insert(c, i, px, py, depth + 1, y);
    }

    fn subdivide(&mut self, node: u32) {
        let (cx, cy, half) = {
            let nd = &self.nodes[node as usize];
            (nd.cx, nd.cy, nd.half)
        };
        let q = half * 0.5;
        let base = self.nodes.len() as u32;
        self.nodes.push(Node::leaf(cx - q, cy - q, q));
        self.nodes.push(Node::leaf(cx + q, cy - q, q));
        self.nodes.push(Node::leaf(cx - q, cy + q, q));
        self.nodes.push(Node::leaf(cx + q, cy + q, q));
        self.nodes[node as usize].children = base;
    }

    fn child_for(&self, node: u32, px: f64, py: f64) -> u32 {
        let nd = &self.nodes[node as usize];
        let ix = u32::from(px >= nd.cx);
        let iy = u32::from(py >= nd.cy);
        nd.children + ix + 2 * iy
    }

    /// Student-t repulsion terms for point `i` at `(px, py)`: returns
    /// `(Σ wⱼ²·(x−xⱼ), Σ wⱼ²·(y−yⱼ), Σ wⱼ)` over j ≠ i with
    /// `w = 1/(1 + d²)`. Internal nodes whose width/distance ratio is below
    /// `theta` contribute their center of mass; `theta = 0` visits every point.
    pub fn repulsion(
        &self,
        i: u32,
        px: f64,
        py: f64,
        theta: f64,
        stack: &mut Vec<u32>,
        y: &[f64],
    ) -> (f64, f64, f64) {
        let mut fx = 0.0;
        let mut fy = 0.0;
        let mut z = 0.0;
        let t2 = theta * theta;
        stack.clear();
        stack.push(0);
        while let Some(nidx) = stack.pop() {
            let nd = &self.nodes[nidx as usize];
            if nd.mass == 0 {
                continue;
            }
            if nd.children == NIL {
                let mut j = nd.head;
                while j != NIL {
                    if j != i {
                        let dx = px - y[2 * j as usize];
                        let dy = py - y[2 * j as usize + 1];
                        let w = 1.0 / (1.0 + dx * dx + dy * dy);
                        z += w;
                        let w2 = w * w;
                        fx += w2 * dx;
                        fy += w2 * dy;
                    }
                    j = self.next[j as usize];
                }
            } else {
                let dx = px - nd.comx;
                let dy = py - nd.comy;
                let d2 = dx * dx + dy * dy;
                let width = 2.0 * nd.half;
                if width * width < t2 * d2 {
                    let m = f64::from(nd.mass);
                    let w = 1.0 / (1.0 + d2);
                    z += m * w;
                    let mw2 = m * w * w;
                    fx += mw2 * dx;
                    fy += mw2 * dy;
                } else {
                    let c = nd.children;
                    stack.push(c);
                    stack.push(c + 1);
                    stack.push(c + 2);
                    stack.push(c + 3);
                }
            }
        }
        (fx, fy, z)
    }
}
