use crate::error::Result;

use super::episode::Episode;
use super::loss::label_groups;

/// Pixel-space nearest class centroid (squared Euclidean distance).
pub fn nearest_centroid_predict(episode: &Episode) -> Result<Vec<usize>> {
    let len = episode.support[0].pixels.len();
    let centroids: Vec<Vec<f64>> = label_groups(&episode.support_labels, episode.way())?
        .iter()
        .map(|g| {
            let mut c = vec![0.0; len];
            for &i in g {
                for (a, &p) in c.iter_mut().zip(&episode.support[i].pixels) {
                    *a += p as f64;
                }
            }
            c.iter_mut().for_each(|a| *a /= g.len() as f64);
            c
        })
        .collect();
    Ok(episode
        .query
        .iter()
        .map(|q| {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(&q.pixels).map(|(a, &p)| (a - p as f64).powi(2)).sum() };
            let mut best = 0;
            for k in 1..centroids.len() {
                if dist(&centroids[k]) < dist(&centroids[best]) {
                    best = k;
                }
            }
            best
        })
        .collect())
}
