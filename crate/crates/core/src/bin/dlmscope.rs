fn main() {
    std::process::exit(dlmscope::cli::main_with_args(std::env::args_os()));
}
