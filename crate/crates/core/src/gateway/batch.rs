use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::error::{Error, Result};

/// Order-preserving parallel map over at most `max_parallel` worker threads.
///
/// On the first failure the remaining unstarted items are skipped and the
/// failure with the lowest index among those that ran is returned, wrapped
/// in [`Error::Batch`].
pub fn parallel_map<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let results = run(items, max_parallel, true, &f);
    let mut out = Vec::with_capacity(items.len());
    let mut first_err = None;
    for (index, slot) in results.into_iter().enumerate() {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => {
                first_err = Some(Error::Batch {
                    index,
                    source: Box::new(e),
                });
                break;
            }
            None => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Like [`parallel_map`] but runs every item and keeps each outcome.
pub fn parallel_map_results<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Vec<Result<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    run(items, max_parallel, false, &f)
        .into_iter()
        .map(|slot| slot.expect("every item runs when not aborting"))
        .collect()
}

fn run<T, R, F>(items: &[T], max_parallel: usize, abort_on_error: bool, f: &F) -> Vec<Option<Result<R>>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let workers = max_parallel.max(1).min(items.len());
    if workers <= 1 {
        let mut out: Vec<Option<Result<R>>> = Vec::with_capacity(items.len());
        let mut failed = false;
        for (i, item) in items.iter().enumerate() {
            if failed {
                out.push(None);
                continue;
            }
            let r = f(i, item);
            failed = abort_on_error && r.is_err();
            out.push(Some(r));
        }
        return out;
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                if abort_on_error && r.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("batch slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("batch slots")
}
