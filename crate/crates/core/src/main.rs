fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).format_timestamp(None).init();
    std::process::exit(emha::harness::cli::run(std::env::args_os()));
}
