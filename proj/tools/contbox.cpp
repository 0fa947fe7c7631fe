#include <iostream>
int main() { std::cout << "contbox\n"; return 0; }
