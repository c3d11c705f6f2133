fn main() {
    std::process::exit(mer_mce::cli::main_with_args(std::env::args_os()));
}
