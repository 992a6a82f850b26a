pub mod equivalence;
pub mod gradcheck;
pub mod params;
pub mod rate;
pub mod voronoi;
