//! Ordered set of `u64` keys backed by an AVL tree.

use std::cmp::Ordering;

type Link = Option<Box<Node>>;

#[derive(Debug, Clone)]
struct Node {
    key: u64,
    height: i32,
    left: Link,
    right: Link,
}

fn height(link: &Link) -> i32 {
    link.as_ref().map_or(0, |n| n.height)
}

impl Node {
    fn leaf(key: u64) -> Box<Node> {
        Box::new(Node {
            key,
            height: 1,
            left: None,
            right: None,
        })
    }

    fn update(&mut self) {
        self.height = 1 + height(&self.left).max(height(&self.right));
    }

    fn balance(&self) -> i32 {
        height(&self.left) - height(&self.right)
    }
}

fn rotate_right(mut n: Box<Node>) -> Box<Node> {
    let mut l = n.left.take().expect("left child");
    n.left = l.right.take();
    n.update();
    l.right = Some(n);
    l.update();
    l
}

fn rotate_left(mut n: Box<Node>) -> Box<Node> {
    let mut r = n.right.take().expect("right child");
    n.right = r.left.take();
    n.update();
    r.left = Some(n);
    r.update();
    r
}

fn rebalance(mut n: Box<Node>) -> Box<Node> {
    n.update();
    let b = n.balance();
    if b > 1 {
        if n.left.as_ref().is_some_and(|l| l.balance() < 0) {
            n.left = n.left.take().map(rotate_left);
        }
        return rotate_right(n);
    }
    if b < -1 {
        if n.right.as_ref().is_some_and(|r| r.balance() > 0) {
            n.right = n.right.take().map(rotate_right);
        }
        return rotate_left(n);
    }
    n
}

fn insert(link: Link, key: u64, added: &mut bool) -> Box<Node> {
    let Some(mut n) = link else {
        *added = true;
        return Node::leaf(key);
    };
    match key.cmp(&n.key) {
        Ordering::Less => n.left = Some(insert(n.left.take(), key, added)),
        Ordering::Greater => n.right = Some(insert(n.right.take(), key, added)),
        Ordering::Equal => return n,
    }
    rebalance(n)
}

fn take_min(mut n: Box<Node>) -> (Link, u64) {
    match n.left.take() {
        None => (n.right.take(), n.key),
        Some(l) => {
            let (rest, min) = take_min(l);
            n.left = rest;
            (Some(rebalance(n)), min)
        }
    }
}

fn remove(link: Link, key: u64, removed: &mut bool) -> Link {
    let mut n = link?;
    match key.cmp(&n.key) {
        Ordering::Less => n.left = remove(n.left.take(), key, removed),
        Ordering::Greater => n.right = remove(n.right.take(), key, removed),
        Ordering::Equal => {
            *removed = true;
            match (n.left.take(), n.right.take()) {
                (None, r) => return r,
                (l, None) => return l,
                (l, Some(r)) => {
                    let (rest, min) = take_min(r);
                    n.key = min;
                    n.left = l;
                    n.right = rest;
                }
            }
        }
    }
    Some(rebalance(n))
}

#[derive(Debug, Clone, Default)]
pub struct AvlMap {
    root: Link,
    len: usize,
}

impl AvlMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Returns true if the key was not present.
    pub fn insert(&mut self, key: u64) -> bool {
        let mut added = false;
        self.root = Some(insert(self.root.take(), key, &mut added));
        self.len += usize::from(added);
        added
    }

    /// Returns true if the key was present.
    pub fn remove(&mut self, key: u64) -> bool {
        let mut removed = false;
        self.root = remove(self.root.take(), key, &mut removed);
        self.len -= usize::from(removed);
        removed
    }

    pub fn contains(&self, key: u64) -> bool {
        let mut cur = &self.root;
        while let Some(n) = cur {
            cur = match key.cmp(&n.key) {
                Ordering::Less => &n.left,
                Ordering::Greater => &n.right,
                Ordering::Equal => return true,
            };
        }
        false
    }

    /// Keys in ascending order.
    pub fn keys(&self) -> Vec<u64> {
        fn walk(link: &Link, out: &mut Vec<u64>) {
            if let Some(n) = link {
                walk(&n.left, out);
                out.push(n.key);
                walk(&n.right, out);
            }
        }
        let mut out = Vec::with_capacity(self.len);
        walk(&self.root, &mut out);
        out
    }

    pub fn height(&self) -> i32 {
        height(&self.root)
    }

    /// True when every node's subtrees differ in height by at most one and
    /// the stored heights are exact.
    pub fn is_balanced(&self) -> bool {
        fn check(link: &Link) -> Option<i32> {
            let Some(n) = link else { return Some(0) };
            let l = check(&n.left)?;
            let r = check(&n.right)?;
            let h = 1 + l.max(r);
            ((l - r).abs() <= 1 && h == n.height).then_some(h)
        }
        check(&self.root).is_some()
    }
}
