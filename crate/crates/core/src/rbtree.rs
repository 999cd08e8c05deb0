//! An ordered map implemented as a red-black tree over an index arena.
//!
//! Nodes live in a `Vec` and refer to each other by index; slot 0 is the
//! shared black sentinel leaf. Removed slots are recycled through a free
//! list, so steady-state churn does not allocate.

use std::cmp::Ordering;

const NIL: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Color {
    Red,
    Black,
}

#[derive(Debug, Clone, Copy)]
struct Links {
    parent: usize,
    left: usize,
    right: usize,
    color: Color,
}

const SENTINEL: Links = Links {
    parent: NIL,
    left: NIL,
    right: NIL,
    color: Color::Black,
};

#[derive(Debug, Clone)]
pub struct RbTree<K, V> {
    links: Vec<Links>,
    entries: Vec<Option<(K, V)>>,
    free: Vec<usize>,
    root: usize,
    len: usize,
}

impl<K: Ord, V> Default for RbTree<K, V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord, V> RbTree<K, V> {
    pub fn new() -> Self {
        Self {
            links: vec![SENTINEL],
            entries: vec![None],
            free: Vec::new(),
            root: NIL,
            len: 0,
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut t = Self::new();
        t.links.reserve(n);
        t.entries.reserve(n);
        t
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.links.truncate(1);
        self.links[NIL] = SENTINEL;
        self.entries.truncate(1);
        self.free.clear();
        self.root = NIL;
        self.len = 0;
    }

    fn key(&self, n: usize) -> &K {
        &self.entries[n].as_ref().expect("live node").0
    }

    fn entry(&self, n: usize) -> (&K, &V) {
        let (k, v) = self.entries[n].as_ref().expect("live node");
        (k, v)
    }

    fn find(&self, key: &K) -> usize {
        let mut cur = self.root;
        while cur != NIL {
            match key.cmp(self.key(cur)) {
                Ordering::Less => cur = self.links[cur].left,
                Ordering::Greater => cur = self.links[cur].right,
                Ordering::Equal => return cur,
            }
        }
        NIL
    }

    pub fn get(&self, key: &K) -> Option<&V> {
        match self.find(key) {
            NIL => None,
            n => Some(self.entry(n).1),
        }
    }

    pub fn contains_key(&self, key: &K) -> bool {
        self.find(key) != NIL
    }

    fn min_from(&self, mut n: usize) -> usize {
        while self.links[n].left != NIL {
            n = self.links[n].left;
        }
        n
    }

    fn max_from(&self, mut n: usize) -> usize {
        while self.links[n].right != NIL {
            n = self.links[n].right;
        }
        n
    }

    pub fn first(&self) -> Option<(&K, &V)> {
        (self.root != NIL).then(|| self.entry(self.min_from(self.root)))
    }

    pub fn last(&self) -> Option<(&K, &V)> {
        (self.root != NIL).then(|| self.entry(self.max_from(self.root)))
    }

    fn successor(&self, n: usize) -> usize {
        if self.links[n].right != NIL {
            return self.min_from(self.links[n].right);
        }
        let mut x = n;
        let mut p = self.links[x].parent;
        while p != NIL && x == self.links[p].right {
            x = p;
            p = self.links[p].parent;
        }
        p
    }

    /// In-order iteration.
    pub fn iter(&self) -> Iter<'_, K, V> {
        Iter {
            tree: self,
            next: if self.root == NIL { NIL } else { self.min_from(self.root) },
            remaining: self.len,
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.iter().map(|(k, _)| k)
    }

    fn alloc(&mut self, key: K, val: V, parent: usize) -> usize {
        let links = Links {
            parent,
            left: NIL,
            right: NIL,
            color: Color::Red,
        };
        match self.free.pop() {
            Some(i) => {
                self.links[i] = links;
                self.entries[i] = Some((key, val));
                i
            }
            None => {
                self.links.push(links);
                self.entries.push(Some((key, val)));
                self.links.len() - 1
            }
        }
    }

    fn rotate_left(&mut self, x: usize) {
        let y = self.links[x].right;
        let y_left = self.links[y].left;
        self.links[x].right = y_left;
        if y_left != NIL {
            self.links[y_left].parent = x;
        }
        let xp = self.links[x].parent;
        self.links[y].parent = xp;
        if xp == NIL {
            self.root = y;
        } else if x == self.links[xp].left {
            self.links[xp].left = y;
        } else {
            self.links[xp].right = y;
        }
        self.links[y].left = x;
        self.links[x].parent = y;
    }

    fn rotate_right(&mut self, x: usize) {
        let y = self.links[x].left;
        let y_right = self.links[y].right;
        self.links[x].left = y_right;
        if y_right != NIL {
            self.links[y_right].parent = x;
        }
        let xp = self.links[x].parent;
        self.links[y].parent = xp;
        if xp == NIL {
            self.root = y;
        } else if x == self.links[xp].right {
            self.links[xp].right = y;
        } else {
            self.links[xp].left = y;
        }
        self.links[y].right = x;
        self.links[x].parent = y;
    }

    /// Inserts `key`, returning the previous value if the key was present.
    pub fn insert(&mut self, key: K, val: V) -> Option<V> {
        let mut parent = NIL;
        let mut cur = self.root;
        let mut go_left = false;
        while cur != NIL {
            parent = cur;
            match key.cmp(self.key(cur)) {
                Ordering::Less => {
                    go_left = true;
                    cur = self.links[cur].left;
                }
                Ordering::Greater => {
                    go_left = false;
                    cur = self.links[cur].right;
                }
                Ordering::Equal => {
                    let slot = self.entries[cur].as_mut().expect("live node");
                    return Some(std::mem::replace(&mut slot.1, val));
                }
            }
        }
        let z = self.alloc(key, val, parent);
        if parent == NIL {
            self.root = z;
        } else if go_left {
            self.links[parent].left = z;
        } else {
            self.links[parent].right = z;
        }
        self.len += 1;
        self.insert_fixup(z);
        None
    }

    fn insert_fixup(&mut self, mut z: usize) {
        while self.links[self.links[z].parent].color == Color::Red {
            let p = self.links[z].parent;
            let g = self.links[p].parent;
            if p == self.links[g].left {
                let uncle = self.links[g].right;
                if self.links[uncle].color == Color::Red {
                    self.links[p].color = Color::Black;
                    self.links[uncle].color = Color::Black;
                    self.links[g].color = Color::Red;
                    z = g;
                } else {
                    if z == self.links[p].right {
                        z = p;
                        self.rotate_left(z);
                    }
                    let p = self.links[z].parent;
                    let g = self.links[p].parent;
                    self.links[p].color = Color::Black;
                    self.links[g].color = Color::Red;
                    self.rotate_right(g);
                }
            } else {
                let uncle = self.links[g].left;
                if self.links[uncle].color == Color::Red {
                    self.links[p].color = Color::Black;
                    self.links[uncle].color = Color::Black;
                    self.links[g].color = Color::Red;
                    z = g;
                } else {
                    if z == self.links[p].left {
                        z = p;
                        self.rotate_right(z);
                    }
                    let p = self.links[z].parent;
                    let g = self.links[p].parent;
                    self.links[p].color = Color::Black;
                    self.links[g].color = Color::Red;
                    self.rotate_left(g);
                }
            }
        }
        let root = self.root;
        self.links[root].color = Color::Black;
    }

    fn transplant(&mut self, u: usize, v: usize) {
        let up = self.links[u].parent;
        if up == NIL {
            self.root = v;
        } else if u == self.links[up].left {
            self.links[up].left = v;
        } else {
            self.links[up].right = v;
        }
        // Written even when `v` is the sentinel; the delete fixup reads it.
        self.links[v].parent = up;
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let z = self.find(key);
        if z == NIL {
            return None;
        }
        self.remove_node(z).map(|(_, v)| v)
    }

    /// Removes and returns the smallest entry.
    pub fn pop_first(&mut self) -> Option<(K, V)> {
        if self.root == NIL {
            return None;
        }
        let n = self.min_from(self.root);
        self.remove_node(n)
    }

    fn remove_node(&mut self, z: usize) -> Option<(K, V)> {
        let mut y = z;
        let mut y_color = self.links[y].color;
        let x;
        if self.links[z].left == NIL {
            x = self.links[z].right;
            self.transplant(z, x);
        } else if self.links[z].right == NIL {
            x = self.links[z].left;
            self.transplant(z, x);
        } else {
            y = self.min_from(self.links[z].right);
            y_color = self.links[y].color;
            x = self.links[y].right;
            if self.links[y].parent == z {
                self.links[x].parent = y;
            } else {
                self.transplant(y, x);
                let zr = self.links[z].right;
                self.links[y].right = zr;
                self.links[zr].parent = y;
            }
            self.transplant(z, y);
            let zl = self.links[z].left;
            self.links[y].left = zl;
            self.links[zl].parent = y;
            self.links[y].color = self.links[z].color;
        }
        if y_color == Color::Black {
            self.remove_fixup(x);
        }
        self.links[NIL] = SENTINEL;
        self.len -= 1;
        self.free.push(z);
        self.entries[z].take()
    }

    fn remove_fixup(&mut self, mut x: usize) {
        while x != self.root && self.links[x].color == Color::Black {
            let p = self.links[x].parent;
            if x == self.links[p].left {
                let mut w = self.links[p].right;
                if self.links[w].color == Color::Red {
                    self.links[w].color = Color::Black;
                    self.links[p].color = Color::Red;
                    self.rotate_left(p);
                    w = self.links[self.links[x].parent].right;
                }
                let (wl, wr) = (self.links[w].left, self.links[w].right);
                if self.links[wl].color == Color::Black && self.links[wr].color == Color::Black {
                    self.links[w].color = Color::Red;
                    x = self.links[x].parent;
                } else {
                    if self.links[wr].color == Color::Black {
                        self.links[wl].color = Color::Black;
                        self.links[w].color = Color::Red;
                        self.rotate_right(w);
                        w = self.links[self.links[x].parent].right;
                    }
                    let p = self.links[x].parent;
                    self.links[w].color = self.links[p].color;
                    self.links[p].color = Color::Black;
                    let wr = self.links[w].right;
                    self.links[wr].color = Color::Black;
                    self.rotate_left(p);
                    x = self.root;
                }
            } else {
                let mut w = self.links[p].left;
                if self.links[w].color == Color::Red {
                    self.links[w].color = Color::Black;
                    self.links[p].color = Color::Red;
                    self.rotate_right(p);
                    w = self.links[self.links[x].parent].left;
                }
                let (wl, wr) = (self.links[w].left, self.links[w].right);
                if self.links[wl].color == Color::Black && self.links[wr].color == Color::Black {
                    self.links[w].color = Color::Red;
                    x = self.links[x].parent;
                } else {
                    if self.links[wl].color == Color::Black {
                        self.links[wr].color = Color::Black;
                        self.links[w].color = Color::Red;
                        self.rotate_left(w);
                        w = self.links[self.links[x].parent].left;
                    }
                    let p = self.links[x].parent;
                    self.links[w].color = self.links[p].color;
                    self.links[p].color = Color::Black;
                    let wl = self.links[w].left;
                    self.links[wl].color = Color::Black;
                    self.rotate_right(p);
                    x = self.root;
                }
            }
        }
        self.links[x].color = Color::Black;
    }

    /// Longest root-to-leaf path, counted in nodes.
    pub fn height(&self) -> usize {
        fn go<K, V>(t: &RbTree<K, V>, n: usize) -> usize {
            if n == NIL {
                0
            } else {
                1 + go(t, t.links[n].left).max(go(t, t.links[n].right))
            }
        }
        go(self, self.root)
    }

    /// Checks ordering, parent links, the red rule and equal black heights.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.links[self.root].color != Color::Black {
            return Err("root is red".into());
        }
        fn go<K: Ord, V>(t: &RbTree<K, V>, n: usize, count: &mut usize) -> Result<usize, String> {
            if n == NIL {
                return Ok(1);
            }
            *count += 1;
            let Links { left, right, color, .. } = t.links[n];
            for child in [left, right] {
                if child != NIL && t.links[child].parent != n {
                    return Err(format!("node {child} has a stale parent link"));
                }
            }
            if left != NIL && t.key(left) >= t.key(n) {
                return Err("left child out of order".into());
            }
            if right != NIL && t.key(right) <= t.key(n) {
                return Err("right child out of order".into());
            }
            if color == Color::Red
                && (t.links[left].color == Color::Red || t.links[right].color == Color::Red)
            {
                return Err("red node with red child".into());
            }
            let lh = go(t, left, count)?;
            let rh = go(t, right, count)?;
            if lh != rh {
                return Err(format!("black heights differ: {lh} vs {rh}"));
            }
            Ok(lh + usize::from(color == Color::Black))
        }
        let mut count = 0;
        go(self, self.root, &mut count)?;
        if count != self.len {
            return Err(format!("reachable {count} nodes, len {}", self.len));
        }
        Ok(())
    }
}

pub struct Iter<'a, K, V> {
    tree: &'a RbTree<K, V>,
    next: usize,
    remaining: usize,
}

impl<'a, K: Ord, V> Iterator for Iter<'a, K, V> {
    type Item = (&'a K, &'a V);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next == NIL {
            return None;
        }
        let n = self.next;
        self.next = self.tree.successor(n);
        self.remaining -= 1;
        Some(self.tree.entry(n))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
