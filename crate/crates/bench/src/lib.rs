// SPDX-License-Identifier: Apache-2.0

//! Criterion benchmarks for the mixer, generator and training step; see
//! `benches/`.
