fn main() {
    std::process::exit(voxresnet::cli::run(std::env::args_os()));
}
