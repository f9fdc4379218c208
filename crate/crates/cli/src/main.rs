fn main() {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = hca_cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("hca: {}", e.message.trim_end());
        std::process::exit(e.code);
    }
}
