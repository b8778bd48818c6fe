//! Straight-line restatement of the grid tabletop rules and a breadth-first
//! solver over them.
//!
//! Action factors are plain indices: move `[north(+y), east(+x), south(−y),
//! west(−x), stay]`, vertical `[raise, lower, toggle_grip, none]`, rotate
//! `[cw(+1 quarter), ccw(−1 quarter), none]`.

use std::collections::{HashMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefGrid {
    pub width: usize,
    pub height: usize,
    pub max_stack: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RefObject {
    pub x: usize,
    pub y: usize,
    pub level: usize,
    pub quarter: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RefState {
    pub gx: usize,
    pub gy: usize,
    pub gz: u8,
    pub held: Option<usize>,
    pub objs: Vec<RefObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RefTarget {
    pub x: usize,
    pub y: usize,
    pub level: usize,
    pub quarter: u8,
    pub in_air: bool,
}

pub type RefAction = [usize; 3];

pub fn all_actions() -> Vec<RefAction> {
    let mut v = Vec::with_capacity(60);
    for m in 0..5 {
        for g in 0..4 {
            for r in 0..3 {
                v.push([m, g, r]);
            }
        }
    }
    v
}

pub fn ref_step(grid: &RefGrid, s: &RefState, a: RefAction) -> RefState {
    let mut n = s.clone();

    let (dx, dy): (i64, i64) = match a[0] {
        0 => (0, 1),
        1 => (1, 0),
        2 => (0, -1),
        3 => (-1, 0),
        _ => (0, 0),
    };
    n.gx = (n.gx as i64 + dx).clamp(0, grid.width as i64 - 1) as usize;
    n.gy = (n.gy as i64 + dy).clamp(0, grid.height as i64 - 1) as usize;
    if let Some(h) = n.held {
        n.objs[h].x = n.gx;
        n.objs[h].y = n.gy;
    }

    if a[1] == 0 {
        n.gz = 1;
        if let Some(h) = n.held {
            n.objs[h].level = 1;
        }
    } else if a[1] == 1 {
        n.gz = 0;
        if let Some(h) = n.held {
            n.objs[h].level = 0;
        }
    } else if a[1] == 2 {
        if let Some(h) = n.held {
            let mut resting = 0;
            for (i, o) in n.objs.iter().enumerate() {
                if i != h && o.x == n.gx && o.y == n.gy {
                    resting += 1;
                }
            }
            if resting < grid.max_stack {
                n.objs[h].level = resting;
                n.held = None;
            }
        } else if n.gz == 0 {
            let mut top: Option<usize> = None;
            for (i, o) in n.objs.iter().enumerate() {
                if o.x == n.gx && o.y == n.gy {
                    match top {
                        Some(t) if n.objs[t].level >= o.level => {}
                        _ => top = Some(i),
                    }
                }
            }
            if let Some(t) = top {
                n.held = Some(t);
                n.objs[t].level = 0;
            }
        }
    }

    if let Some(h) = n.held {
        if a[2] == 0 {
            n.objs[h].quarter = (n.objs[h].quarter + 1) % 4;
        } else if a[2] == 1 {
            n.objs[h].quarter = (n.objs[h].quarter + 3) % 4;
        }
    }
    n
}

/// Exact match of every object against its target (the default thresholds reduce to this).
pub fn reached(s: &RefState, targets: &[RefTarget]) -> bool {
    targets.iter().enumerate().all(|(i, t)| {
        let o = &s.objs[i];
        let in_air = s.held == Some(i) && s.gz == 1;
        o.x == t.x && o.y == t.y && o.level == t.level && o.quarter == t.quarter && in_air == t.in_air
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BfsOutcome {
    /// Shortest action script.
    Found(Vec<RefAction>),
    Unreachable,
    LimitExceeded,
}

/// Breadth-first search for a shortest action script reaching `targets`.
pub fn bfs_solve(grid: &RefGrid, start: &RefState, targets: &[RefTarget], max_expansions: usize) -> BfsOutcome {
    if reached(start, targets) {
        return BfsOutcome::Found(vec![]);
    }
    let actions = all_actions();
    let mut parent: HashMap<RefState, Option<(RefState, RefAction)>> = HashMap::new();
    parent.insert(start.clone(), None);
    let mut queue = VecDeque::from([start.clone()]);
    let mut expansions = 0;
    while let Some(s) = queue.pop_front() {
        expansions += 1;
        if expansions > max_expansions {
            return BfsOutcome::LimitExceeded;
        }
        for &a in &actions {
            let n = ref_step(grid, &s, a);
            if parent.contains_key(&n) {
                continue;
            }
            parent.insert(n.clone(), Some((s.clone(), a)));
            if reached(&n, targets) {
                let mut script = vec![];
                let mut cur = n;
                while let Some(Some((prev, act))) = parent.get(&cur) {
                    script.push(*act);
                    cur = prev.clone();
                }
                script.reverse();
                return BfsOutcome::Found(script);
            }
            queue.push_back(n);
        }
    }
    BfsOutcome::Unreachable
}
