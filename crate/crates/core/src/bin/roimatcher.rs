fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = roimatcher::cli::run(std::env::args_os()) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
