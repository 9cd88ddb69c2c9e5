use std::collections::BTreeMap;

use fog_core::manifest::{
    parse_manifest, render_manifest, CloudGroupSpec, LaunchManifest, ManifestErrorKind, NetworkMode, NodeSpec,
    Placement,
};
use proptest::prelude::*;

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,10}"
}

fn group() -> impl Strategy<Value = CloudGroupSpec> {
    (
        ident(),
        "[a-z0-9]{1,6}\\.[a-z0-9]{1,8}",
        prop::option::of("[a-z_]{1,8}\\.sh"),
        any::<bool>(),
        prop::option::of(prop::collection::vec("/[a-z]{1,6}", 0..4)),
        prop::option::of("[a-z]{2}-[a-z]{4}-[1-3]"),
    )
        .prop_map(|(name, instance_type, setup_script, proxy, topics, region)| CloudGroupSpec {
            name,
            instance_type,
            setup_script,
            image: None,
            network: if proxy { NetworkMode::Proxy } else { NetworkMode::Direct },
            topics,
            region,
            line: 0,
        })
}

fn manifest() -> impl Strategy<Value = LaunchManifest> {
    (
        prop::collection::vec(group(), 0..3),
        prop::collection::vec(
            (ident(), ident(), prop::collection::vec("[a-z0-9_=.-]{1,8}", 0..3), any::<prop::sample::Index>()),
            1..6,
        ),
    )
        .prop_map(|(groups, nodes)| {
            let cloud_groups: BTreeMap<_, _> = groups.into_iter().map(|g| (g.name.clone(), g)).collect();
            let names: Vec<_> = cloud_groups.keys().cloned().collect();
            let mut seen = std::collections::BTreeSet::new();
            let nodes = nodes
                .into_iter()
                .filter(|(n, ..)| seen.insert(n.clone()))
                .map(|(name, exec, args, pick)| {
                    let slot = pick.index(names.len() + 1);
                    NodeSpec {
                        package: format!("pkg_{name}"),
                        name,
                        exec,
                        args,
                        placement: if slot == names.len() {
                            Placement::Edge
                        } else {
                            Placement::Cloud(names[slot].clone())
                        },
                        line: 0,
                    }
                })
                .collect();
            LaunchManifest { nodes, cloud_groups }
        })
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(m in manifest()) {
        let text = render_manifest(&m);
        prop_assert_eq!(parse_manifest(&text).unwrap(), m);
    }
}

#[test]
fn structural_errors_name_their_line() {
    let dangling = "[node a]\npackage = p\nexec = e\nplacement = cloud:nowhere\n";
    let e = parse_manifest(dangling).unwrap_err();
    assert_eq!(e.line, 1);
    assert!(matches!(e.kind, ManifestErrorKind::DanglingGroupRef { .. }));

    let dup = "[node a]\npackage = p\nexec = e\n\n[node a]\npackage = p\nexec = e\n";
    assert_eq!(parse_manifest(dup).unwrap_err().line, 5);

    let bad_net = "[node a]\npackage = p\nexec = e\n[cloud g]\ninstance_type = t\nnetwork = vpn\n";
    let e = parse_manifest(bad_net).unwrap_err();
    assert_eq!(e.line, 6);

    assert_eq!(parse_manifest("").unwrap_err().kind, ManifestErrorKind::NoNodes);
}

#[test]
fn network_defaults_to_direct() {
    let m = parse_manifest("[node a]\npackage = p\nexec = e\nplacement = cloud:g\n[cloud g]\ninstance_type = t\n")
        .unwrap();
    assert_eq!(m.cloud_groups["g"].network, NetworkMode::Direct);
}
