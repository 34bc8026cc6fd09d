use asa_ext_zigzag::{manifest, Zigzag, NAME, VERSION};

fn main() -> std::io::Result<()> {
    if std::env::args().nth(1).as_deref() == Some("--manifest") {
        println!("{}", asa_core::canonical::to_string_pretty(&manifest()));
        return Ok(());
    }
    asa_core::engine::extension::serve_stdio(NAME, VERSION, || Box::new(Zigzag::default()))
}
