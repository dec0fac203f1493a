fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = std::panic::catch_unwind(|| goelan::cli::run(std::env::args_os(), &mut std::io::stdout())).unwrap_or(2);
    std::process::exit(code);
}
