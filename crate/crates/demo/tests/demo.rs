use tce_demo::{attention, demo_model, impulse_response, render, HEIGHT, WIDTH};

#[test]
fn rendering_is_sized_and_deterministic() {
    let a = render("2024", 7, false).unwrap();
    assert_eq!(a.len(), HEIGHT * WIDTH);
    assert_eq!(a, render("2024", 7, false).unwrap());
    assert_ne!(a, render("2024", 8, false).unwrap());
    let clean = render("7", 1, true).unwrap();
    assert!(clean.iter().any(|&b| b > 200) && clean.contains(&0));
}

#[test]
fn bad_text_is_an_error() {
    assert!(render("", 1, true).is_err());
    assert!(render("123456", 1, true).is_err());
    assert!(render("12a", 1, true).is_err());
}

#[test]
fn impulse_reach_matches_the_receptive_field() {
    let length = 70;
    let rows = impulse_response(4, 3, length).unwrap();
    assert_eq!(rows.len(), 5 * length);
    let reach: Vec<usize> =
        rows.chunks(length).map(|r| r.iter().rposition(|&v| v == 1).unwrap()).collect();
    // last influenced step grows by 2 * (kernel - 1) * dilation per layer
    assert_eq!(reach, vec![0, 4, 12, 28, 60]);
    assert!(impulse_response(1, 0, 10).is_err());
}

#[test]
fn attention_maps_cover_each_stage() {
    let first = attention("314", 3, 0, &[]).unwrap();
    assert_eq!((first.height(), first.width()), (16, 50));
    assert!(first.values().iter().all(|&v| v > 0.0 && v < 1.0));
    let last = attention("314", 3, 3, &[]).unwrap();
    assert_eq!((last.height(), last.width()), (2, 25));
    assert!(attention("314", 3, 4, &[]).is_err());
}

#[test]
fn attention_reads_a_checkpoint() {
    let model = demo_model(&[], 5).unwrap();
    let bytes = tce_core::checkpoint::Checkpoint::new(model).to_bytes().unwrap();
    assert_eq!(attention("42", 5, 1, &bytes).unwrap(), attention("42", 5, 1, &[]).unwrap());
    assert!(attention("42", 5, 1, b"junk").is_err());
}
