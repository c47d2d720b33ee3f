fn main() {
    std::process::exit(avatar_cli::main_with_args(std::env::args_os()));
}
