fn main() {
    std::process::exit(claad::evalcli::main_from_env());
}
