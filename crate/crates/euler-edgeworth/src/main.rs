fn main() {
    std::process::exit(euler_edgeworth::cli::run());
}
