use super::Coord;

/// Row-major `n * n` Euclidean distance matrix.
pub fn pair_distances(coords: &[Coord]) -> Vec<f64> {
    let n = coords.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(&coords[i], &coords[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    dist
}

#[inline]
pub(crate) fn euclid(a: &Coord, b: &Coord) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
