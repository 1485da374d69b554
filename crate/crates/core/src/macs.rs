//! Multiply-accumulate accounting.
//!
//! Counting is opt-in and per thread: [`count`] installs a fresh
//! [`MacReport`] for the duration of a closure, every forward matrix product
//! on that thread adds `m·n·k` to the entry named by the current [`scope`]
//! path, and the report is handed back when the closure returns. Without an
//! installed report [`record`] is a no-op, so numeric results never depend on
//! whether counting is active.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Foreground statistics captured by one select-integrate attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundRecord {
    pub label: String,
    pub tokens: usize,
    pub foreground: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacReport {
    entries: BTreeMap<String, u64>,
    foreground: Vec<ForegroundRecord>,
}

impl MacReport {
    pub fn entries(&self) -> &BTreeMap<String, u64> {
        &self.entries
    }

    pub fn foreground(&self) -> &[ForegroundRecord] {
        &self.foreground
    }

    pub fn add(&mut self, label: &str, macs: u64) {
        *self.entries.entry(label.to_owned()).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Sum over every entry at or below the scope path `prefix`.
    pub fn total_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| {
                k.strip_prefix(prefix)
                    .is_some_and(|rest| rest.is_empty() || rest.starts_with('/'))
            })
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over every entry whose label satisfies `pred`.
    pub fn total_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v)
            .sum()
    }

    /// `label<TAB>count` lines in label order, closed by a `total` line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}\t{v}");
        }
        let _ = writeln!(out, "total\t{}", self.total());
        out
    }
}

struct Counter {
    report: MacReport,
    scopes: Vec<String>,
}

thread_local! {
    static COUNTER: RefCell<Option<Counter>> = const { RefCell::new(None) };
}

/// Runs `f` with a fresh report installed on this thread and returns it.
/// A report already installed by an enclosing call is restored afterwards.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, MacReport) {
    let previous = COUNTER.with(|c| {
        c.borrow_mut().replace(Counter {
            report: MacReport::default(),
            scopes: Vec::new(),
        })
    });
    let out = f();
    let counter = COUNTER.with(|c| std::mem::replace(&mut *c.borrow_mut(), previous));
    (out, counter.map(|c| c.report).unwrap_or_default())
}

pub fn is_counting() -> bool {
    COUNTER.with(|c| c.borrow().is_some())
}

/// Adds `macs` under the current scope path.
pub fn record(macs: u64) {
    COUNTER.with(|c| {
        if let Some(counter) = c.borrow_mut().as_mut() {
            let label = if counter.scopes.is_empty() {
                "unscoped".to_owned()
            } else {
                counter.scopes.join("/")
            };
            counter.report.add(&label, macs);
        }
    });
}

pub fn record_foreground(tokens: usize, foreground: usize) {
    COUNTER.with(|c| {
        if let Some(counter) = c.borrow_mut().as_mut() {
            let label = counter.scopes.join("/");
            counter.report.foreground.push(ForegroundRecord {
                label,
                tokens,
                foreground,
            });
        }
    });
}

/// Pops its scope when dropped.
#[must_use = "the scope ends when the guard is dropped"]
pub struct ScopeGuard {
    pushed: bool,
}

/// Pushes `label` onto the scope path until the guard drops.
pub fn scope(label: impl Into<String>) -> ScopeGuard {
    let pushed = COUNTER.with(|c| match c.borrow_mut().as_mut() {
        Some(counter) => {
            counter.scopes.push(label.into());
            true
        }
        None => false,
    });
    ScopeGuard { pushed }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.pushed {
            COUNTER.with(|c| {
                if let Some(counter) = c.borrow_mut().as_mut() {
                    counter.scopes.pop();
                }
            });
        }
    }
}
