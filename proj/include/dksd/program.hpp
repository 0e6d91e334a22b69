#pragma once

// A small interpreted form of the differentiable primitives, used to run and
// differentiate computations described as data (tests, tooling).
//
// Slot layout: slots [0, n_inputs) hold the inputs, every instruction
// appends one slot. The last slot is the program output and must be 1x1.

#include <string>
#include <vector>

#include "dksd/autodiff.hpp"
#include "dksd/linalg.hpp"
#include "dksd/nn_ops.hpp"

namespace dksd {

struct Instruction {
  std::string op;
  std::vector<int> args;
  double attr = 0.0;                 // scale factor, offset, epsilon, or selects imaginary part for eig
  std::vector<Eigen::Index> range{};  // slice bounds, gather indices, or lstm {batch, steps}
};

struct Program {
  std::vector<Instruction> code;
};

template <class S>
struct ProgramResult {
  S output{};
  std::vector<Matrix<S>> grads;  ///< one per input; zero for inputs without requires_grad
};

template <class S>
ProgramResult<S> evaluate_and_backprop(const Program& program, const std::vector<Matrix<S>>& inputs,
                                       const std::vector<bool>& requires_grad = {}) {
  ad::Graph<S> g;
  std::vector<ad::Var<S>> slots;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const bool rg = requires_grad.empty() ? true : requires_grad.at(i);
    slots.push_back(g.input(inputs[i], rg));
  }
  auto arg = [&](const Instruction& ins, std::size_t k) -> ad::Var<S> {
    if (k >= ins.args.size()) throw ValidationError("instruction '" + ins.op + "' is missing operand " + std::to_string(k));
    const int slot = ins.args[k];
    if (slot < 0 || static_cast<std::size_t>(slot) >= slots.size()) {
      throw RangeError("instruction '" + ins.op + "' references slot " + std::to_string(slot));
    }
    return slots[static_cast<std::size_t>(slot)];
  };
  auto bounds = [](const Instruction& ins, std::size_t n) {
    if (ins.range.size() < n) throw ValidationError("instruction '" + ins.op + "' needs " + std::to_string(n) + " range values");
  };

  for (const auto& ins : program.code) {
    const std::string& op = ins.op;
    ad::Var<S> out;
    if (op == "add") {
      out = ad::add(arg(ins, 0), arg(ins, 1));
    } else if (op == "sub") {
      out = ad::sub(arg(ins, 0), arg(ins, 1));
    } else if (op == "mul") {
      out = ad::mul(arg(ins, 0), arg(ins, 1));
    } else if (op == "scale") {
      out = ad::scale(arg(ins, 0), static_cast<S>(ins.attr));
    } else if (op == "add_scalar") {
      out = ad::add_scalar(arg(ins, 0), static_cast<S>(ins.attr));
    } else if (op == "matmul") {
      out = ad::matmul(arg(ins, 0), arg(ins, 1));
    } else if (op == "transpose") {
      out = ad::transpose(arg(ins, 0));
    } else if (op == "add_row") {
      out = ad::add_row(arg(ins, 0), arg(ins, 1));
    } else if (op == "tanh") {
      out = ad::tanh(arg(ins, 0));
    } else if (op == "sigmoid") {
      out = ad::sigmoid(arg(ins, 0));
    } else if (op == "mean") {
      out = ad::mean(arg(ins, 0));
    } else if (op == "sum") {
      out = ad::sum(arg(ins, 0));
    } else if (op == "sum_squares") {
      out = ad::sum_squares(arg(ins, 0));
    } else if (op == "squared_error") {
      out = ad::squared_error(arg(ins, 0), arg(ins, 1));
    } else if (op == "concat_cols" || op == "concat_rows") {
      std::vector<ad::Var<S>> parts;
      for (std::size_t k = 0; k < ins.args.size(); ++k) parts.push_back(arg(ins, k));
      out = op == "concat_cols" ? ad::concat_cols(parts) : ad::concat_rows(parts);
    } else if (op == "slice_rows") {
      bounds(ins, 2);
      out = ad::slice_rows(arg(ins, 0), ins.range[0], ins.range[1]);
    } else if (op == "slice_cols") {
      bounds(ins, 2);
      out = ad::slice_cols(arg(ins, 0), ins.range[0], ins.range[1]);
    } else if (op == "gather_rows") {
      out = ad::gather_rows(arg(ins, 0), ins.range);
    } else if (op == "solve_regularized") {
      out = ad::solve_regularized(arg(ins, 0), arg(ins, 1), arg(ins, 2));
    } else if (op == "eig") {
      auto e = ad::eig(arg(ins, 0));
      out = ins.attr != 0.0 ? e.imag : e.real;
    } else if (op == "instance_norm") {
      out = ad::instance_norm(arg(ins, 0), static_cast<S>(ins.attr));
    } else if (op == "lstm") {
      bounds(ins, 2);
      out = ad::lstm(arg(ins, 0), arg(ins, 1), arg(ins, 2), arg(ins, 3), SequenceLayout{ins.range[0], ins.range[1]});
    } else {
      throw UnsupportedPrimitiveError(op);
    }
    slots.push_back(out);
  }
  if (slots.empty()) throw ValidationError("empty program");
  const ad::Var<S> result = slots.back();
  if (result.rows() != 1 || result.cols() != 1) {
    throw ShapeError("program output must be scalar, got " + shape_string(result.rows(), result.cols()));
  }
  g.backward(result);
  ProgramResult<S> r;
  r.output = result.item();
  for (std::size_t i = 0; i < inputs.size(); ++i) r.grads.push_back(slots[i].grad());
  return r;
}

}  // namespace dksd
