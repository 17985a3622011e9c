fn main() {
    if let Err(e) = atrseq_cli::run(std::env::args_os()) {
        eprintln!("atrseq: {e}");
        std::process::exit(e.exit_code());
    }
}
