use tmtsc_web::Demo;

fn json(s: String) -> serde_json::Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn summary_train_and_simulate() {
    let mut demo = Demo::new(300, 1.0, 4).unwrap();
    let s = json(demo.summary().unwrap());
    let parts = ["train", "validation", "test"].map(|k| s[k].as_u64().unwrap());
    assert_eq!(parts.iter().sum::<u64>(), s["companies"].as_u64().unwrap());

    let t = json(demo.train("mgru", 3, 1).unwrap());
    assert_eq!(t["model"], "M-GRU");
    assert_eq!(t["losses"].as_array().unwrap().len(), 3);
    let auc = t["test_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let rows = json(demo.simulate("5, 10", 20, 0).unwrap());
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["portfolio_size"], 10);
}

#[test]
fn bayes_auc_spans_chance_to_separable() {
    assert!((Demo::bayes_auc(0.0) - 0.5).abs() < 1e-9);
    assert!(Demo::bayes_auc(1.0) > 0.95);
}
