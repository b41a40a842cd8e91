//! Differentiable sparse-voxel surface reconstruction.
//!
//! A desk-scale engine that optimizes a sparse voxel octree (per-corner
//! densities plus spherical-harmonic appearance) against posed images,
//! monocular depth cues, and multi-view photo-consistency, then extracts
//! a triangle mesh through TSDF fusion.
//!
//! The crate is organized bottom-up:
//! - [`math`], [`sh`]: small fixed-size linear algebra and the SH basis.
//! - [`grid`]: the sparse voxel octree, subdivision/pruning, checkpoints.
//! - [`camera`], [`scene`], [`dataset`], [`pfm`]: cameras, synthetic
//!   ground-truth scenes, and dataset I/O.
//! - [`render`]: exact ray-octree traversal and alpha compositing.
//! - [`grad`]: reverse-mode backward passes and the finite-difference oracle.
//! - [`loss`], [`ssim`], [`depth`], [`mvs`], [`surfreg`]: the loss terms.
//! - [`adam`], [`adaptive`], [`trainer`]: optimization and octree control.
//! - [`tsdf`], [`mesh`], [`evalmesh`]: fusion, extraction, and metrics.
//! - [`config`], [`manifest`], [`cli`]: the command-line front end.

pub mod adam;
pub mod adaptive;
pub mod camera;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod evalmesh;
pub mod grad;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod manifest;
pub mod math;
pub mod mesh;
pub mod mvs;
pub mod pfm;
pub mod render;
pub mod scene;
pub mod sh;
pub mod ssim;
pub mod surfreg;
pub mod trainer;
pub mod tsdf;
