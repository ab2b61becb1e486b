fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    std::process::exit(tractfuse::cli::main_with_args(std::env::args_os()));
}
