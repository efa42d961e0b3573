fn main() {
    std::process::exit(clustergnn::run_cli())
}
