fn main() {
    std::process::exit(fuselab::cli::main_with_args(std::env::args_os()));
}
