use leaklab::config::*;
use leaklab::Error;

const MINIMAL: &str = r#"
[model]
layer_dims = [16, 32, 4]
activations = ["relu"]
has_bias = [true, true]

[dataset.synthetic]
kind = "gaussian_blobs"
n = 400
"#;

fn no_env() -> Vec<(String, String)> {
    Vec::new()
}

#[test]
fn defaults_fill_missing_keys() {
    let c = parse_config(MINIMAL, &[]).unwrap();
    assert_eq!(c.eggv.rho, 0.004);
    assert_eq!(c.batch_size, 8);
    assert_eq!(c.repetitions, 100);
    assert_eq!(c.poison, PoisonChoice::None);
    assert!(c.attack.is_none() && c.landscape.is_none());
}

#[test]
fn out_of_range_rho_names_key_and_line() {
    let text = format!("{MINIMAL}\n[eggv]\nrho = 1.5\n");
    match parse_config(&text, &[]).unwrap_err() {
        Error::Config { key, line, .. } => {
            assert_eq!(key, "eggv.rho");
            assert_eq!(
                line,
                Some(text.lines().position(|l| l.starts_with("rho")).unwrap() + 1)
            );
        }
        other => panic!("{other}"),
    }
}

#[test]
fn unknown_key_is_reported() {
    let text = format!("batch_sise = 4\n{MINIMAL}");
    match parse_config(&text, &[]).unwrap_err() {
        Error::Config { key, line, .. } => {
            assert_eq!(key, "batch_sise");
            assert_eq!(line, Some(1));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn toml_round_trip() {
    let text = format!(
        "run_id = \"rt\"\nmaster_seed = 9\nbatch_size = 4\nbatching = \"unique_labels\"\npoison = {{ fishing = {{ target_class = 2 }} }}\n{MINIMAL}\n[attack]\nmethod = \"ig\"\niterations = 10\nstep_size = 0.1\ntv_weight = 0.001\ndistance = \"negative_cosine\"\n\n[landscape]\nsteps = 5\n"
    );
    let c = parse_config(&text, &[]).unwrap();
    assert_eq!(c.poison, PoisonChoice::Fishing { target_class: 2 });
    let again = parse_config(&c.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(again, c);
}

#[test]
fn env_overrides_map_to_dotted_keys() {
    let env = vec![
        ("GL_EGGV__RHO".to_string(), "0.5".to_string()),
        ("GL_BATCH_SIZE".to_string(), "2".to_string()),
        ("GL_RUN_ID".to_string(), "from-env".to_string()),
        ("HOME".to_string(), "/root".to_string()),
    ];
    let o = env_overrides(env);
    assert_eq!(o.len(), 3);
    assert!(o.contains(&("eggv.rho".to_string(), "0.5".to_string())));
    let c = parse_config(MINIMAL, &o).unwrap();
    assert_eq!(
        (c.eggv.rho, c.batch_size, c.run_id.as_str()),
        (0.5, 2, "from-env")
    );
}

#[test]
fn bad_override_fails_validation() {
    let o = env_overrides([("GL_EGGV__RHO".to_string(), "0".to_string())]);
    assert!(matches!(
        parse_config(MINIMAL, &o),
        Err(Error::Config { .. })
    ));
}

#[test]
fn load_resolves_files_and_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.csv"), "0,0.1,0.2\n1,0.3,0.4\n").unwrap();
    let text = format!(
        "output_dir = {:?}\nbatch_size = 1\n[model]\nlayer_dims = [2, 2]\nactivations = []\nhas_bias = [true]\n[dataset.file]\npath = \"d.csv\"\nformat = \"csv\"\n",
        dir.path().join("out").display().to_string()
    );
    let path = dir.path().join("c.toml");
    std::fs::write(&path, text).unwrap();
    let c = load_config_with_env(&path, no_env()).unwrap();
    assert!(matches!(&c.dataset, DatasetSource::File { path, .. } if path.is_file()));
    assert!(dir.path().join("out").is_dir());
}

#[test]
fn missing_inputs_are_errors() {
    assert!(load_config_with_env(std::path::Path::new("/nonexistent/c.toml"), no_env()).is_err());
    let text = MINIMAL.replace(
        "[dataset.synthetic]\nkind = \"gaussian_blobs\"\nn = 400",
        "[dataset.file]\npath = \"/nonexistent.csv\"\nformat = \"csv\"",
    );
    assert!(matches!(parse_config(&text, &[]), Err(Error::Config { key, .. }) if key == "dataset"));
    assert!(parse_config("[model", &[]).is_err());
}

#[test]
fn cross_field_checks() {
    let unique = format!("batching = \"unique_labels\"\n{MINIMAL}");
    assert!(
        matches!(parse_config(&unique, &[]), Err(Error::Config { key, .. }) if key == "batch_size")
    );
    let fishing =
        format!("batch_size = 2\npoison = {{ fishing = {{ target_class = 4 }} }}\n{MINIMAL}");
    assert!(parse_config(&fishing, &[]).is_err());
    let image =
        format!("batch_size = 2\n{MINIMAL}\n[image]\nheight = 3\nwidth = 3\nchannels = 1\n");
    assert!(matches!(parse_config(&image, &[]), Err(Error::Config { key, .. }) if key == "image"));
}
