fn main() {
    std::process::exit(blockpipe::cli::main_with_args(std::env::args_os()));
}
