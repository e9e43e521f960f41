fn main() {
    tnet::cli::init_logging();
    std::process::exit(tnet::cli::main_with_args(std::env::args_os()));
}
