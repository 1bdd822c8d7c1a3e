//! Synthetic multi-domain scenes, rasterization and image folders.

pub mod dataset;
pub mod folder;
pub mod image;
pub mod io;
pub mod render;
pub mod scene;

pub use dataset::{build_dataset, render_seeds, DatasetConfig, DatasetManifest, DomainSpec, Split};
pub use folder::{load_folder, DomainDataset};
pub use image::{DomainImage, DomainKind};
pub use io::{display_rgb, load_png, save_grid, save_png};
pub use render::{render_domain, RenderKind};
pub use scene::{generate_scene, SceneConfig, SceneSpec, Shape, ShapeKind};
