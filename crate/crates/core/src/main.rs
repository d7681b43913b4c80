fn main() {
    std::process::exit(metakgr::cli::main_with_args(std::env::args_os()));
}
