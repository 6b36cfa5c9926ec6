fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("ILAUNCH_LOG")).try_init();
    let code = ilaunch::cli::run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
