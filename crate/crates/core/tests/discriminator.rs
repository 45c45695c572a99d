use tabsynth::discriminator::{
    focal_loss, train_discriminator, DiscHyper, DiscTrainConfig, Discriminator, FocalLossConfig,
};
use tabsynth::policy::{TokenId, Vocabulary};

fn corpus(words: &[&str], n: usize, offset: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let a = words[(i + offset) % words.len()];
            let b = words[(i / words.len() + offset) % words.len()];
            format!("x is {a}, y is {b}")
        })
        .collect()
}

fn setup(real: &[String], fake: &[String]) -> (Discriminator, Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    let vocab = Vocabulary::build(real.iter().chain(fake).map(String::as_str));
    let r = real.iter().map(|s| vocab.tokenize(s)).collect();
    let f = fake.iter().map(|s| vocab.tokenize(s)).collect();
    (Discriminator::new(vocab, DiscHyper::small(), 11).unwrap(), r, f)
}

fn cfg(epochs: usize) -> DiscTrainConfig {
    DiscTrainConfig {
        epochs,
        lr: 3e-3,
        ..DiscTrainConfig::default()
    }
}

#[test]
fn separable_corpora_are_told_apart() {
    let real = corpus(&["red", "green", "blue"], 120, 0);
    let fake = corpus(&["cat", "dog", "fox"], 120, 0);
    let (mut d, r, f) = setup(&real, &fake);
    let log = train_discriminator(&mut d, &r, &f, &cfg(4)).unwrap();
    assert!(log.final_accuracy() >= 0.95, "{log:?}");
    let held_real = d.score(&d.vocab().tokenize("x is blue, y is green"));
    let held_fake = d.score(&d.vocab().tokenize("x is fox, y is cat"));
    assert!(held_real > 0.9 && held_fake < 0.1, "{held_real} {held_fake}");
}

#[test]
fn identical_corpora_stay_near_chance() {
    let real = corpus(&["red", "green", "blue", "teal"], 200, 0);
    let (mut d, r, f) = setup(&real, &real);
    let log = train_discriminator(&mut d, &r, &f, &cfg(2)).unwrap();
    assert!((log.final_accuracy() - 0.5).abs() <= 0.1, "{log:?}");
}

#[test]
fn swapping_labels_mirrors_the_score() {
    let real = corpus(&["red", "green", "blue"], 100, 0);
    let fake = corpus(&["cat", "dog", "fox"], 100, 0);
    let (mut a, r, f) = setup(&real, &fake);
    let mut b = a.clone();
    train_discriminator(&mut a, &r, &f, &cfg(4)).unwrap();
    train_discriminator(&mut b, &f, &r, &cfg(4)).unwrap();
    for s in ["x is green, y is red", "x is dog, y is fox", "x is blue, y is blue"] {
        let t = a.vocab().tokenize(s);
        let (sa, sb) = (a.score(&t), b.score(&t));
        assert!((sa - (1.0 - sb)).abs() <= 0.05, "{s}: {sa} vs {sb}");
    }
}

#[test]
fn scores_are_probabilities_and_complement() {
    let real = corpus(&["red", "green"], 40, 0);
    let fake = corpus(&["cat", "dog"], 40, 0);
    let (mut d, r, f) = setup(&real, &fake);
    train_discriminator(&mut d, &r, &f, &cfg(1)).unwrap();
    for t in r.iter().chain(&f) {
        let s = d.score(t);
        assert!(s > 0.0 && s < 1.0);
        let fake_prob = 1.0 - s;
        assert!((s + fake_prob - 1.0).abs() < 1e-15);
    }
}

#[test]
fn training_is_reproducible() {
    let real = corpus(&["red", "green", "blue"], 60, 0);
    let fake = corpus(&["red", "cat", "dog"], 60, 1);
    let (d0, r, f) = setup(&real, &fake);
    let mut a = d0.clone();
    let mut b = d0;
    let la = train_discriminator(&mut a, &r, &f, &cfg(2)).unwrap();
    let lb = train_discriminator(&mut b, &r, &f, &cfg(2)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn empty_class_is_rejected() {
    let real = corpus(&["red"], 5, 0);
    let (mut d, r, _) = setup(&real, &real);
    assert!(train_discriminator(&mut d, &r, &[], &cfg(1)).is_err());
}

#[test]
fn focal_loss_reduces_to_cross_entropy() {
    let ce = FocalLossConfig { gamma: 0.0, alpha: 1.0 };
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        assert!((focal_loss(p, &ce).unwrap() + p.ln()).abs() < 1e-12);
    }
    let fl = FocalLossConfig { gamma: 2.0, alpha: 1.0 };
    assert!((focal_loss(0.9, &fl).unwrap() - 0.0010536).abs() < 1e-7);
    assert!(focal_loss(0.0, &fl).is_err() && focal_loss(1.0, &fl).is_err());
}
