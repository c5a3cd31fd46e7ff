//! Simulated low-precision floating point, tensor-set bookkeeping, precision
//! assignment schemes, a small mixed-precision training engine, and an
//! executable knapsack reduction for the precision/accuracy tradeoff.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assign;
pub mod engine;
pub mod fpnum;
pub mod graph;
pub mod npreduce;
