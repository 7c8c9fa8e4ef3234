fn main() {
    let h: u8 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let params = schedca::xmss::XmssParams::new(h).unwrap();
    let t = std::time::Instant::now();
    let (pk, sk) = schedca::xmss::keygen(params, &[7u8; 96]).unwrap();
    let kg = t.elapsed();
    let sig = schedca::xmss::sign(&sk, 3, b"m").unwrap();
    println!(
        "h={h} keygen {:?} sig {} pk {} verify {}",
        kg,
        sig.to_bytes().len(),
        pk.to_bytes().len(),
        schedca::xmss::verify(&pk, b"m", &sig)
    );
}
