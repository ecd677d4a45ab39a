//! Closed-form ridge in primal and dual form, penalty selection, and the
//! scope classifier fitted on edit demonstrations.

use hice::classifier::ridge::{fit_ridge_with, normal_equation_residual, RidgeForm};
use hice::classifier::{
    build_demonstrations, fit_classifier, label_matrix, random_projection, select_lambda, ClassifierConfig,
    Label,
};
use hice::embeddings::EmbeddingMatrix;
use hice::synthetic::{build_fixture, FixtureKind};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = DMatrix::from_fn(30, 8, |_, _| StandardNormal.sample(&mut rng));
    let y = DMatrix::from_fn(30, 2, |_, _| StandardNormal.sample(&mut rng));
    let primal = fit_ridge_with(&f, &y, 0.1, RidgeForm::Primal)?;
    let dual = fit_ridge_with(&f, &y, 0.1, RidgeForm::Dual)?;
    println!(
        "primal/dual max difference {:.2e}, residual {:.2e}",
        (&primal - &dual).abs().max(),
        normal_equation_residual(&f, &y, 0.1, &primal)
    );

    let labels: Vec<Label> = (0..40)
        .map(|i| if i % 2 == 0 { Label::InDomain } else { Label::OutOfDomain })
        .collect();
    let clusters = DMatrix::from_fn(40, 4, |i, j| {
        let centre = if i % 2 == 0 { 10.0 } else { -10.0 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        if j == 0 { centre + noise } else { noise }
    });
    let (projected, _) = random_projection(&clusters, 3, 64)?;
    let sel = select_lambda(&projected, &label_matrix(&labels), &[1e-2, 1.0, 1e2], 0.8, 3)?;
    println!("separable clusters: lambda {:e}, accuracy per penalty {:?}", sel.lambda, sel.accuracies);

    let bundle = build_fixture(FixtureKind::EndToEnd, 7)?;
    let demos: Vec<_> = bundle
        .train
        .samples()
        .iter()
        .map(build_demonstrations)
        .collect::<hice::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let features: &EmbeddingMatrix = &bundle.train_demonstrations;
    let config = ClassifierConfig {
        projection_dim: Some(512),
        seed: 7,
        ..ClassifierConfig::default()
    };
    let model = fit_classifier(features, &demos, &config)?;
    println!(
        "scope classifier: d={} M={} lambda {:e} validation accuracy {:.3}",
        model.d(),
        model.m(),
        model.lambda,
        model.val_accuracy
    );
    for d in demos.iter().take(4) {
        let (label, margin) = model.classify(features.require(&d.feature_key())?)?;
        println!("  {:<10} {:?} margin {margin:+.3}", format!("{:?}", d.kind), label);
    }
    Ok(())
}
