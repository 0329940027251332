use qbi_acceptance::criteria::run;

#[test]
fn quadrature_equivalence_passes() {
    let v = run(1);
    assert!(v.pass, "{v}");
}

#[test]
fn kernel_properties_pass() {
    let v = run(11);
    assert!(v.pass, "{v}");
}

#[test]
fn subsampling_inflation_passes() {
    let v = run(4);
    assert!(v.pass, "{v}");
}
