//! PCA projection, silhouette scores and a permutation test on clustered
//! points.

use hyperdecoder::analysis::{gaussian_clusters, pca_project, permutation_test, silhouette};
use hyperdecoder::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centres = vec![vec![3.0; 6], vec![-3.0; 6], {
        let mut c = vec![0.0; 6];
        c[0] = 4.0;
        c
    }];
    let (points, labels) = gaussian_clusters(&centres, 40, 1.0, &mut rng);
    let pca = pca_project(&points, 2)?;
    println!("explained variance: {:?}", pca.ratios);
    println!("silhouette in 6-D {:.3}, in 2-D {:.3}", silhouette(&points, &labels)?, silhouette(&pca.coords, &labels)?);

    let shuffled: Vec<usize> = (0..labels.len()).map(|i| i % 3).collect();
    println!("silhouette with arbitrary labels {:.3}", silhouette(&points, &shuffled)?);
    let t = permutation_test(&points, &labels, 200, 0)?;
    println!("permutation test: observed {:.3}, null {:.3} ± {:.3}, z {:.1}", t.observed, t.null_mean, t.null_std, t.z());
    Ok(())
}
