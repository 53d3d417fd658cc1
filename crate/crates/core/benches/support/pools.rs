// Shared by the benches: run a closure on rayon's global pool or on a one-thread pool.

#[cfg(feature = "parallel")]
pub fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("one-thread pool");
    vec![("rayon", None), ("one-thread", Some(single))]
}

#[cfg(not(feature = "parallel"))]
pub fn pools() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
pub fn run<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn run<T>(_: &Option<()>, f: impl FnOnce() -> T) -> T {
    f()
}
