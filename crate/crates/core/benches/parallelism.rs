//! Placeholder; the real benchmarks land with the protocol module.

fn main() {}
